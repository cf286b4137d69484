//! Small numerical kernels shared by the physics modules.

use num_complex::Complex64;

const PIO2_1: f64 = 1.570_796_326_734_125_614_17;
const PIO2_2: f64 = 6.077_100_506_303_965_976_60e-11;
const PIO2_3: f64 = 2.022_266_248_795_950_631_54e-21;
const TWO_OVER_PI: f64 = std::f64::consts::FRAC_2_PI;

const SIN_COEF: [f64; 6] = [
    1.589_623_015_765_465_680_60e-10,
    -2.505_074_776_285_780_728_66e-8,
    2.755_731_362_138_572_452_13e-6,
    -1.984_126_982_958_953_859_96e-4,
    8.333_333_333_322_118_588_78e-3,
    -1.666_666_666_666_663_072_95e-1,
];
const COS_COEF: [f64; 6] = [
    -1.135_853_652_138_768_173_00e-11,
    2.087_570_084_197_473_167_78e-9,
    -2.755_731_417_929_673_881_12e-7,
    2.480_158_728_885_170_453_48e-5,
    -1.388_888_888_887_305_641_16e-3,
    4.166_666_666_666_659_292_18e-2,
];

/// `(sin x, cos x)` for `|x| < 2^20`, branch-free so loops over it vectorize.
///
/// Three-part Cody-Waite reduction by pi/2 followed by the Cephes minimax
/// polynomials on `[-pi/4, pi/4]`; agrees with libm to a few ulp.
#[inline(always)]
pub fn sin_cos(x: f64) -> (f64, f64) {
    let n = (x * TWO_OVER_PI).round();
    let r = ((x - n * PIO2_1) - n * PIO2_2) - n * PIO2_3;
    let z = r * r;
    let mut ps = SIN_COEF[0];
    let mut pc = COS_COEF[0];
    for i in 1..6 {
        ps = ps * z + SIN_COEF[i];
        pc = pc * z + COS_COEF[i];
    }
    let s = r + r * z * ps;
    let c = 1.0 - 0.5 * z + z * z * pc;
    let q = (n as i64) & 3;
    let swap = q & 1 == 1;
    let (s0, c0) = if swap { (c, s) } else { (s, c) };
    let sign_s = if q & 2 == 2 { -1.0 } else { 1.0 };
    let sign_c = if (q + 1) & 2 == 2 { -1.0 } else { 1.0 };
    (sign_s * s0, sign_c * c0)
}

#[inline(always)]
pub fn cis(x: f64) -> Complex64 {
    let (s, c) = sin_cos(x);
    Complex64::new(c, s)
}

/// Trapezoid integral from each grid point to the last one:
/// `out[n] = int_{t_n}^{t_end} x dt`, so `out[last] = 0`.
pub fn cumint_to_end(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in (0..n.saturating_sub(1)).rev() {
        out[i] = out[i + 1] + 0.5 * dt * (x[i] + x[i + 1]);
    }
    out
}

/// Transpose of [`cumint_to_end`] as a linear map.
pub fn cumint_to_end_adjoint(y_bar: &[f64], dt: f64) -> Vec<f64> {
    let n = y_bar.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    // prefix[k] = sum_{i <= k} y_bar[i]
    let mut prefix = 0.0;
    let mut prev_prefix = 0.0;
    for m in 0..n {
        prefix += y_bar[m];
        let mut v = 0.0;
        if m + 1 < n {
            v += prefix;
        }
        if m >= 1 {
            v += prev_prefix;
        }
        out[m] = 0.5 * dt * v;
        prev_prefix = prefix;
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `||a - b|| / max(||b||, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / norm(b).max(1e-300)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sin_cos_matches_libm() {
        let mut rng = SplitMix64::new(5);
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let scale = [1.0, 10.0, 1e3, 1e5][i % 4];
            let x = rng.uniform(-scale, scale);
            let (s, c) = sin_cos(x);
            worst = worst.max((s - x.sin()).abs()).max((c - x.cos()).abs());
        }
        assert!(worst < 5e-15, "worst deviation {worst}");
        let (s, c) = sin_cos(0.0);
        assert_eq!((s, c), (0.0, 1.0));
    }

    #[test]
    fn cumint_of_constant_is_linear_ramp() {
        let x = vec![2.0; 11];
        let y = cumint_to_end(&x, 0.1);
        for (i, v) in y.iter().enumerate() {
            assert!((v - 2.0 * 0.1 * (10 - i) as f64).abs() < 1e-12);
        }
        assert_eq!(*y.last().unwrap(), 0.0);
    }

    #[test]
    fn cumint_adjoint_is_transpose() {
        let mut rng = SplitMix64::new(8);
        for n in [1usize, 2, 3, 17] {
            let x: Vec<f64> = rng.normals(n);
            let yb: Vec<f64> = rng.normals(n);
            let lhs = dot(&cumint_to_end(&x, 0.3), &yb);
            let rhs = dot(&x, &cumint_to_end_adjoint(&yb, 0.3));
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()), "n={n}");
        }
    }

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
    }
}

//! In-line Fresnel holography on a square pixel grid.
//!
//! The propagated field is the linear convolution of the object field with
//! the quadratic-phase kernel `h(a, b) = exp(i pi p^2 (a^2 + b^2) / (z lambda))`
//! (pixel offsets `a`, `b`, pixel pitch `p`), evaluated by zero-padded FFT.
//! The kernel carries no `1/(i lambda z)` prefactor, so propagating forward
//! then backward scales a well-sampled field by `(z lambda / p^2)^2`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ForwardModel, Pullback, SystemId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FresnelConfig {
    pub wavelength_m: f64,
    pub distance_m: f64,
    pub pixel_m: f64,
    pub n: usize,
    pub a_ref: f64,
}

impl Default for FresnelConfig {
    fn default() -> Self {
        FresnelConfig {
            wavelength_m: 635e-9,
            distance_m: 0.400,
            pixel_m: 50e-6,
            n: 64,
            a_ref: 1.0,
        }
    }
}

impl FresnelConfig {
    /// `p^2 / (z lambda)`, the kernel's phase coefficient in units of pi.
    pub fn chirp(&self) -> f64 {
        self.pixel_m * self.pixel_m / (self.distance_m * self.wavelength_m)
    }

    /// Kernel phase step between the two outermost pixels at half the grid
    /// width from the centre.
    pub fn edge_phase_step(&self) -> f64 {
        std::f64::consts::PI * self.chirp() * (self.n as f64 - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.wavelength_m, self.distance_m, self.pixel_m, self.a_ref];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.n == 0 {
            return Err(Error::Config("Fresnel parameters must be positive".into()));
        }
        if self.edge_phase_step() >= std::f64::consts::PI {
            return Err(Error::Config(format!(
                "kernel is undersampled: edge phase step {:.3} rad >= pi",
                self.edge_phase_step()
            )));
        }
        Ok(())
    }

    pub fn kernel(&self, a: i64, b: i64) -> Complex64 {
        let r2 = (a * a + b * b) as f64;
        Complex64::from_polar(1.0, std::f64::consts::PI * self.chirp() * r2)
    }
}

/// A complex field on the `n x n` grid as two real planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Field {
    pub fn zeros(len: usize) -> Self {
        Field {
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn real(re: Vec<f64>) -> Self {
        let im = vec![0.0; re.len()];
        Field { re, im }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn abs(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }
}

struct Plan {
    cfg: FresnelConfig,
    pad: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    kernel_hat: Vec<Complex64>,
    kernel_conj_hat: Vec<Complex64>,
}

#[derive(Clone)]
pub struct FresnelModel {
    p: Arc<Plan>,
}

impl std::fmt::Debug for FresnelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FresnelModel").field("cfg", &self.p.cfg).finish()
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            data.swap(r * n + c, c * n + r);
        }
    }
}

fn fft2(plan: &Arc<dyn Fft<f64>>, data: &mut [Complex64], n: usize) {
    plan.process(data);
    transpose(data, n);
    plan.process(data);
    transpose(data, n);
}

impl FresnelModel {
    pub fn new(cfg: FresnelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n;
        let pad = 2 * n;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(pad);
        let inv = planner.plan_fft_inverse(pad);
        let mut k = vec![Complex64::new(0.0, 0.0); pad * pad];
        let reach = n as i64 - 1;
        for a in -reach..=reach {
            for b in -reach..=reach {
                let r = a.rem_euclid(pad as i64) as usize;
                let c = b.rem_euclid(pad as i64) as usize;
                k[r * pad + c] = cfg.kernel(a, b);
            }
        }
        let mut kc: Vec<Complex64> = k.iter().map(|z| z.conj()).collect();
        fft2(&fwd, &mut k, pad);
        fft2(&fwd, &mut kc, pad);
        Ok(FresnelModel {
            p: Arc::new(Plan {
                cfg,
                pad,
                fwd,
                inv,
                kernel_hat: k,
                kernel_conj_hat: kc,
            }),
        })
    }

    pub fn config(&self) -> &FresnelConfig {
        &self.p.cfg
    }

    fn convolve(&self, e: &Field, conj: bool) -> Result<Field> {
        let n = self.p.cfg.n;
        if e.re.len() != n * n || e.im.len() != n * n {
            return Err(Error::Shape(format!(
                "field must be {n}x{n}, got {} and {} values",
                e.re.len(),
                e.im.len()
            )));
        }
        let pad = self.p.pad;
        let mut buf = vec![Complex64::new(0.0, 0.0); pad * pad];
        for y in 0..n {
            for x in 0..n {
                buf[y * pad + x] = Complex64::new(e.re[y * n + x], e.im[y * n + x]);
            }
        }
        fft2(&self.p.fwd, &mut buf, pad);
        let kh = if conj {
            &self.p.kernel_conj_hat
        } else {
            &self.p.kernel_hat
        };
        for (b, k) in buf.iter_mut().zip(kh) {
            *b *= k;
        }
        fft2(&self.p.inv, &mut buf, pad);
        let scale = 1.0 / (pad * pad) as f64;
        let mut out = Field::zeros(n * n);
        for y in 0..n {
            for x in 0..n {
                let z = buf[y * pad + x] * scale;
                out.re[y * n + x] = z.re;
                out.im[y * n + x] = z.im;
            }
        }
        Ok(out)
    }

    /// `E_d = E_o * h` (linear convolution, output on the object grid).
    pub fn propagate(&self, e: &Field) -> Result<Field> {
        self.convolve(e, false)
    }

    /// Convolution with the conjugate kernel (propagation by `-z`).
    pub fn back_propagate(&self, e: &Field) -> Result<Field> {
        self.convolve(e, true)
    }

    /// `I = |a_ref + E_d|^2`.
    pub fn intensity(e: &Field, a_ref: f64) -> Vec<f64> {
        e.re.iter()
            .zip(&e.im)
            .map(|(r, i)| (a_ref + r) * (a_ref + r) + i * i)
            .collect()
    }

    /// Back-propagated amplitude `back_propagate(sqrt(g))`, the input of the
    /// physics-informed baseline.
    pub fn back_propagate_amplitude(&self, g: &[f64]) -> Result<Field> {
        let amp = g.iter().map(|v| v.max(0.0).sqrt()).collect();
        self.back_propagate(&Field::real(amp))
    }
}

struct HologramPullback {
    model: FresnelModel,
    ed: Field,
}

impl Pullback for HologramPullback {
    fn pull(&self, grad_g: &[f64]) -> Vec<f64> {
        let a = self.model.p.cfg.a_ref;
        let w = Field {
            re: grad_g
                .iter()
                .zip(&self.ed.re)
                .map(|(g, r)| 2.0 * g * (a + r))
                .collect(),
            im: grad_g
                .iter()
                .zip(&self.ed.im)
                .map(|(g, i)| 2.0 * g * i)
                .collect(),
        };
        // the kernel is even, so the transpose of E -> E * h is E -> E * h
        // and the real-part pullback is Re(E * conj(h)) applied to w
        self.model
            .back_propagate(&w)
            .expect("pullback field has the grid shape")
            .re
    }
}

impl ForwardModel for FresnelModel {
    fn system(&self) -> SystemId {
        SystemId::Hologram
    }

    fn signal_shape(&self) -> Vec<usize> {
        vec![self.p.cfg.n, self.p.cfg.n]
    }

    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.p.cfg.n, self.p.cfg.n]
    }

    fn is_linear(&self) -> bool {
        false
    }

    fn nonneg_measurement(&self) -> bool {
        true
    }

    fn apply_flat(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(f.len())?;
        let ed = self.propagate(&Field::real(f.to_vec()))?;
        Ok(Self::intensity(&ed, self.p.cfg.a_ref))
    }

    fn linearize(&self, f: &[f64]) -> Result<(Vec<f64>, Box<dyn Pullback>)> {
        self.check_signal_len(f.len())?;
        let ed = self.propagate(&Field::real(f.to_vec()))?;
        let g = Self::intensity(&ed, self.p.cfg.a_ref);
        Ok((
            g,
            Box::new(HologramPullback {
                model: self.clone(),
                ed,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rel_err;
    use crate::rng::SplitMix64;

    fn model() -> FresnelModel {
        FresnelModel::new(FresnelConfig::default()).unwrap()
    }

    fn random_field(rng: &mut SplitMix64, len: usize) -> Field {
        Field {
            re: rng.normals(len),
            im: rng.normals(len),
        }
    }

    fn flat(e: &Field) -> Vec<f64> {
        e.re.iter().chain(&e.im).cloned().collect()
    }

    #[test]
    fn defaults_satisfy_sampling_condition() {
        let c = FresnelConfig::default();
        c.validate().unwrap();
        assert!(c.edge_phase_step() < std::f64::consts::PI);
        let coarse = FresnelConfig {
            pixel_m: 100e-6,
            ..c
        };
        assert!(coarse.validate().is_err());
    }

    #[test]
    fn zero_and_impulse() {
        let m = model();
        let z = m.propagate(&Field::zeros(4096)).unwrap();
        assert!(z.re.iter().chain(&z.im).all(|&v| v == 0.0));
        let z = m.back_propagate(&Field::zeros(4096)).unwrap();
        assert!(z.re.iter().chain(&z.im).all(|&v| v == 0.0));

        let mut e = Field::zeros(4096);
        e.re[32 * 64 + 32] = 1.0;
        let d = m.propagate(&e).unwrap();
        let cfg = m.config();
        for y in 0..64i64 {
            for x in 0..64i64 {
                let k = cfg.kernel(y - 32, x - 32);
                let i = (y * 64 + x) as usize;
                assert!((d.re[i] - k.re).abs() < 1e-12 && (d.im[i] - k.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_direct_double_sum() {
        let m = model();
        let cfg = m.config().clone();
        let n = 64i64;
        let mut rng = SplitMix64::new(17);
        let e = random_field(&mut rng, 4096);
        let fast = m.propagate(&e).unwrap();
        // kernel lookup by offset, then the O(N^4) sum
        let mut table = vec![Complex64::new(0.0, 0.0); ((2 * n - 1) * (2 * n - 1)) as usize];
        for a in -(n - 1)..n {
            for b in -(n - 1)..n {
                table[((a + n - 1) * (2 * n - 1) + b + n - 1) as usize] = cfg.kernel(a, b);
            }
        }
        let mut slow = Field::zeros(4096);
        for py in 0..n {
            for px in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for qy in 0..n {
                    for qx in 0..n {
                        let q = (qy * n + qx) as usize;
                        let k = table[((py - qy + n - 1) * (2 * n - 1) + px - qx + n - 1) as usize];
                        acc += Complex64::new(e.re[q], e.im[q]) * k;
                    }
                }
                let p = (py * n + px) as usize;
                slow.re[p] = acc.re;
                slow.im[p] = acc.im;
            }
        }
        assert!(rel_err(&flat(&fast), &flat(&slow)) < 1e-9);
    }

    #[test]
    fn propagation_is_linear() {
        let m = model();
        let mut rng = SplitMix64::new(2);
        let e1 = random_field(&mut rng, 4096);
        let e2 = random_field(&mut rng, 4096);
        let (a, b) = (1.5, -0.25);
        let mix = Field {
            re: e1.re.iter().zip(&e2.re).map(|(x, y)| a * x + b * y).collect(),
            im: e1.im.iter().zip(&e2.im).map(|(x, y)| a * x + b * y).collect(),
        };
        let d1 = flat(&m.propagate(&e1).unwrap());
        let d2 = flat(&m.propagate(&e2).unwrap());
        let dm = flat(&m.propagate(&mix).unwrap());
        let want: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        assert!(rel_err(&dm, &want) < 1e-12);
    }

    #[test]
    fn intensity_identities() {
        let mut rng = SplitMix64::new(4);
        let e = random_field(&mut rng, 100);
        assert!(FresnelModel::intensity(&Field::zeros(5), 1.3)
            .iter()
            .all(|&v| (v - 1.69).abs() < 1e-15));
        let no_ref = FresnelModel::intensity(&e, 0.0);
        for i in 0..100 {
            assert!((no_ref[i] - (e.re[i].powi(2) + e.im[i].powi(2))).abs() < 1e-12);
        }
        let a = 0.8;
        let i3 = FresnelModel::intensity(&e, a);
        for i in 0..100 {
            let expand = a * a + 2.0 * a * e.re[i] + e.re[i].powi(2) + e.im[i].powi(2);
            assert!((i3[i] - expand).abs() < 1e-12 * (1.0 + expand));
            assert!(i3[i] >= 0.0);
        }
    }

    #[test]
    fn round_trip_recovers_smooth_central_field() {
        let m = model();
        let c = m.config().chirp();
        let mut e = Field::zeros(4096);
        for y in 0..64 {
            for x in 0..64 {
                let (dy, dx) = (y as f64 - 31.5, x as f64 - 31.5);
                let r2 = dy * dy + dx * dx;
                let env = (-r2 / (2.0 * 3.5f64.powi(2))).exp();
                e.re[y * 64 + x] = env * (0.1 * dx).cos();
                e.im[y * 64 + x] = env * 0.5 * (0.07 * dy).sin();
            }
        }
        let back = m.back_propagate(&m.propagate(&e).unwrap()).unwrap();
        let scaled = Field {
            re: back.re.iter().map(|v| v * c * c).collect(),
            im: back.im.iter().map(|v| v * c * c).collect(),
        };
        let err = rel_err(&flat(&scaled), &flat(&e));
        assert!(err < 1e-3, "round-trip error {err}");
    }

    fn digit_like() -> Vec<f64> {
        let mut f = vec![0.0; 4096];
        for y in 20..44 {
            for x in 28..36 {
                f[y * 64 + x] = 1.0;
            }
        }
        for x in 24..40 {
            for y in 20..24 {
                f[y * 64 + x] = 0.8;
            }
        }
        f
    }

    #[test]
    fn back_propagated_amplitude_shows_twin_image() {
        let m = model();
        let f = digit_like();
        let g = m.apply_flat(&f).unwrap();
        let bp = m.back_propagate_amplitude(&g).unwrap();
        // best complex scale s minimising |s * bp - f|
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        for i in 0..4096 {
            let z = Complex64::new(bp.re[i], bp.im[i]);
            num += z.conj() * f[i];
            den += z.norm_sqr();
        }
        let s = num / den;
        let mut resid = 0.0;
        for i in 0..4096 {
            let z = s * Complex64::new(bp.re[i], bp.im[i]);
            resid += (z.re - f[i]).powi(2) + z.im.powi(2);
        }
        let rel = (resid / f.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(rel > 0.05, "residual {rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model();
        let mut rng = SplitMix64::new(8);
        let f: Vec<f64> = (0..4096).map(|_| rng.next_f64()).collect();
        let (g, pb) = m.linearize(&f).unwrap();
        let n = g.len() as f64;
        let grad = pb.pull(&vec![1.0 / n; g.len()]);
        let mean = |f: &[f64]| m.apply_flat(f).unwrap().iter().sum::<f64>() / n;
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.below(4096);
            let mut fp = f.clone();
            fp[i] += h;
            let mut fm = f.clone();
            fm[i] -= h;
            let fd = (mean(&fp) - mean(&fm)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1e-8),
                "coordinate {i}: fd {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn shape_errors() {
        let m = model();
        assert!(matches!(m.propagate(&Field::zeros(10)), Err(Error::Shape(_))));
        assert!(matches!(m.apply_flat(&[0.0; 10]), Err(Error::Shape(_))));
    }
}

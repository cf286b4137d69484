//! Coded-aperture temporal compression: `g = sum_i M_i * f_i`.
//!
//! Signal layout is `[n, n, channels, frames]` row-major, so the flat index of
//! `(y, x, c, i)` is `((y * n + x) * channels + c) * frames + i`. The
//! measurement is `[n, n, channels]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, SplitMix64};
use crate::tensor_file::{self, DType, TensorData};
use crate::types::{ForwardModel, LinearPullback, Pullback, SystemId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoCsConfig {
    pub n: usize,
    pub channels: usize,
    pub frames: usize,
    pub mask_seed: u64,
    /// Probability that a mask pixel is open.
    pub transmittance: f64,
}

impl Default for VideoCsConfig {
    fn default() -> Self {
        VideoCsConfig {
            n: 64,
            channels: 3,
            frames: 4,
            mask_seed: 0,
            transmittance: 0.5,
        }
    }
}

impl VideoCsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.channels == 0 || self.frames == 0 {
            return Err(Error::Config("video dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.transmittance) {
            return Err(Error::Config(format!(
                "transmittance must lie in [0, 1], got {}",
                self.transmittance
            )));
        }
        Ok(())
    }
}

/// One binary mask per frame, each `n x n` and shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub n: usize,
    pub seed: u64,
    pub m: Vec<Vec<u8>>,
}

impl MaskSet {
    /// Frame `i` draws its pixels in row-major order from the stream
    /// `SplitMix64::derive(seed, [tag("mask"), i])`, each open with
    /// probability `p`.
    pub fn generate(seed: u64, n: usize, frames: usize, p: f64) -> Self {
        let m = (0..frames)
            .map(|i| {
                let mut rng = SplitMix64::derive(seed, &[tag("mask"), i as u64]);
                (0..n * n).map(|_| rng.bernoulli(p) as u8).collect()
            })
            .collect();
        MaskSet { n, seed, m }
    }

    pub fn constant(n: usize, frames: usize, value: u8) -> Self {
        MaskSet {
            n,
            seed: 0,
            m: vec![vec![value.min(1); n * n]; frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.m.len()
    }

    pub fn transmittance(&self, frame: usize) -> f64 {
        let open: usize = self.m[frame].iter().map(|&v| v as usize).sum();
        open as f64 / (self.n * self.n) as f64
    }

    /// Stored as an f32 tensor `[frames, n, n]`.
    pub fn to_tensor(&self) -> TensorData {
        let data = self.m.iter().flatten().map(|&v| v as f64).collect();
        TensorData {
            dims: vec![self.frames(), self.n, self.n],
            data,
        }
    }

    pub fn from_tensor(t: &TensorData, seed: u64) -> Result<Self> {
        if t.dims.len() != 3 || t.dims[1] != t.dims[2] {
            return Err(Error::Shape(format!(
                "mask tensor must be [frames, n, n], got {:?}",
                t.dims
            )));
        }
        if t.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        let n = t.dims[1];
        let m = t.data.chunks(n * n).map(|c| c.iter().map(|&v| v as u8).collect()).collect();
        Ok(MaskSet { n, seed, m })
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        tensor_file::write(path, &self.to_tensor(), DType::F32)
    }
}

/// Compressed-sparse-row matrix with 0/1 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row[self.col_idx[k]] = self.values[k];
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct VideoCsModel {
    cfg: VideoCsConfig,
    masks: MaskSet,
}

impl VideoCsModel {
    pub fn new(cfg: VideoCsConfig) -> Result<Self> {
        cfg.validate()?;
        let masks = MaskSet::generate(cfg.mask_seed, cfg.n, cfg.frames, cfg.transmittance);
        Ok(VideoCsModel { cfg, masks })
    }

    pub fn with_masks(cfg: VideoCsConfig, masks: MaskSet) -> Result<Self> {
        cfg.validate()?;
        if masks.n != cfg.n || masks.frames() != cfg.frames {
            return Err(Error::Shape(format!(
                "masks are {} frames of {}x{}, config wants {} of {}x{}",
                masks.frames(),
                masks.n,
                masks.n,
                cfg.frames,
                cfg.n,
                cfg.n
            )));
        }
        Ok(VideoCsModel { cfg, masks })
    }

    pub fn config(&self) -> &VideoCsConfig {
        &self.cfg
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn compress(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(f.len())?;
        let fr = self.cfg.frames;
        let c = self.cfg.channels;
        let mut g = vec![0.0; self.measurement_len()];
        for p in 0..self.cfg.n * self.cfg.n {
            for ch in 0..c {
                let base = (p * c + ch) * fr;
                let mut acc = 0.0;
                for i in 0..fr {
                    if self.masks.m[i][p] == 1 {
                        acc += f[base + i];
                    }
                }
                g[p * c + ch] = acc;
            }
        }
        Ok(g)
    }

    /// Transpose: frame slot `i` of the result is `M_i * g`.
    pub fn adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_measurement_len(g.len())?;
        Ok(self.adjoint_unchecked(g))
    }

    fn adjoint_unchecked(&self, g: &[f64]) -> Vec<f64> {
        let fr = self.cfg.frames;
        let c = self.cfg.channels;
        let mut f = vec![0.0; self.signal_len()];
        for p in 0..self.cfg.n * self.cfg.n {
            for ch in 0..c {
                let base = (p * c + ch) * fr;
                for i in 0..fr {
                    if self.masks.m[i][p] == 1 {
                        f[base + i] = g[p * c + ch];
                    }
                }
            }
        }
        f
    }

    /// The operator as an explicit `(n^2 C) x (n^2 C F)` matrix.
    pub fn as_matrix(&self) -> CsrMatrix {
        let fr = self.cfg.frames;
        let c = self.cfg.channels;
        let rows = self.measurement_len();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for p in 0..self.cfg.n * self.cfg.n {
            for ch in 0..c {
                for i in 0..fr {
                    if self.masks.m[i][p] == 1 {
                        col_idx.push((p * c + ch) * fr + i);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        let values = vec![1.0; col_idx.len()];
        CsrMatrix {
            rows,
            cols: self.signal_len(),
            row_ptr,
            col_idx,
            values,
        }
    }
}

impl ForwardModel for VideoCsModel {
    fn system(&self) -> SystemId {
        SystemId::VideoCs
    }

    fn signal_shape(&self) -> Vec<usize> {
        vec![self.cfg.n, self.cfg.n, self.cfg.channels, self.cfg.frames]
    }

    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.cfg.n, self.cfg.n, self.cfg.channels]
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn nonneg_measurement(&self) -> bool {
        false
    }

    fn apply_flat(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.compress(f)
    }

    fn linearize(&self, f: &[f64]) -> Result<(Vec<f64>, Box<dyn Pullback>)> {
        let g = self.compress(f)?;
        let me = self.clone();
        Ok((g, Box::new(LinearPullback(move |gb: &[f64]| me.adjoint_unchecked(gb)))))
    }

    fn adjoint_flat(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.adjoint(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::dot;

    fn cfg(n: usize, seed: u64) -> VideoCsConfig {
        VideoCsConfig {
            n,
            mask_seed: seed,
            ..VideoCsConfig::default()
        }
    }

    fn rand_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_f64()).collect()
    }

    #[test]
    fn masks_are_reproducible_and_balanced() {
        let a = MaskSet::generate(0, 64, 4, 0.5);
        assert_eq!(a, MaskSet::generate(0, 64, 4, 0.5));
        let b = MaskSet::generate(1, 64, 4, 0.5);
        for i in 0..4 {
            let t = a.transmittance(i);
            assert!((0.47..=0.53).contains(&t), "frame {i}: {t}");
            let differ = a.m[i].iter().zip(&b.m[i]).filter(|(x, y)| x != y).count();
            let frac = differ as f64 / 4096.0;
            assert!((0.45..=0.55).contains(&frac), "frame {i}: {frac}");
        }
    }

    #[test]
    fn constant_masks() {
        let c = cfg(8, 0);
        let mut rng = SplitMix64::new(1);
        let f = rand_vec(&mut rng, 8 * 8 * 12);
        let ones = VideoCsModel::with_masks(c.clone(), MaskSet::constant(8, 4, 1)).unwrap();
        let g = ones.compress(&f).unwrap();
        for (q, gv) in g.iter().enumerate() {
            let s: f64 = f[q * 4..q * 4 + 4].iter().sum();
            assert_eq!(*gv, s);
        }
        let back = ones.adjoint(&g).unwrap();
        for (k, v) in back.iter().enumerate() {
            assert_eq!(*v, g[k / 4]);
        }
        let zeros = VideoCsModel::with_masks(c, MaskSet::constant(8, 4, 0)).unwrap();
        assert!(zeros.compress(&f).unwrap().iter().all(|&v| v == 0.0));
        assert!(zeros.adjoint(&vec![0.0; 192]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn operator_matches_sparse_matrix() {
        let m = VideoCsModel::new(cfg(64, 3)).unwrap();
        let a = m.as_matrix();
        assert_eq!((a.rows, a.cols), (12288, 49152));
        let pop: usize = m.masks().m.iter().flatten().map(|&v| v as usize).sum();
        assert_eq!(a.nnz(), 3 * pop);
        for r in 0..a.rows {
            assert!(a.row_ptr[r + 1] - a.row_ptr[r] <= 4);
        }
        let mut rng = SplitMix64::new(2);
        for _ in 0..3 {
            let f = rand_vec(&mut rng, 49152);
            assert_eq!(a.matvec(&f), m.compress(&f).unwrap());
        }
        let ones = VideoCsModel::with_masks(cfg(4, 0), MaskSet::constant(4, 4, 1)).unwrap();
        let a1 = ones.as_matrix();
        assert!((0..a1.rows).all(|r| a1.row_ptr[r + 1] - a1.row_ptr[r] == 4));
    }

    #[test]
    fn adjoint_is_dense_transpose() {
        let m = VideoCsModel::new(cfg(8, 9)).unwrap();
        let dense = m.as_matrix().to_dense();
        for r in 0..192 {
            let mut e = vec![0.0; 192];
            e[r] = 1.0;
            let col = m.adjoint(&e).unwrap();
            for c in 0..768 {
                assert_eq!(col[c], dense[r][c]);
            }
        }
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let m = VideoCsModel::new(cfg(16, 4)).unwrap();
        let mut rng = SplitMix64::new(4);
        for _ in 0..100 {
            let f = rng.normals(m.signal_len());
            let g = rng.normals(m.measurement_len());
            let lhs = dot(&m.compress(&f).unwrap(), &g);
            let rhs = dot(&f, &m.adjoint(&g).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn superposition() {
        let m = VideoCsModel::new(cfg(16, 5)).unwrap();
        let mut rng = SplitMix64::new(5);
        let f1 = rng.normals(m.signal_len());
        let f2 = rng.normals(m.signal_len());
        let (a, b) = (0.7, -2.5);
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let g1 = m.compress(&f1).unwrap();
        let g2 = m.compress(&f2).unwrap();
        let gm = m.compress(&mix).unwrap();
        for k in 0..gm.len() {
            assert!((gm[k] - (a * g1[k] + b * g2[k])).abs() <= 1e-12 * (1.0 + gm[k].abs()));
        }
    }

    #[test]
    fn shape_errors() {
        let m = VideoCsModel::new(cfg(8, 0)).unwrap();
        assert!(matches!(m.compress(&[0.0; 10]), Err(Error::Shape(_))));
        assert!(matches!(m.adjoint(&[0.0; 10]), Err(Error::Shape(_))));
        assert!(VideoCsModel::with_masks(cfg(8, 0), MaskSet::constant(4, 4, 1)).is_err());
    }

    #[test]
    fn mask_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MaskSet::generate(12, 8, 4, 0.5);
        let p = dir.path().join("masks.tns");
        m.write(&p).unwrap();
        let (t, dtype) = tensor_file::read_with_dtype(&p).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(MaskSet::from_tensor(&t, 12).unwrap(), m);
    }
}

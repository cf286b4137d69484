//! Dataset synthesis for the three systems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imageio::{list_images, read_rgb, square_resize};
use crate::mnist::{images_in, MnistImages};
use crate::physics::fresnel::Field;
use crate::physics::streaking::PulsePhase;
use crate::physics::{FresnelConfig, FresnelModel, PhysicsConfig, StreakingConfig, StreakingModel, VideoCsConfig, VideoCsModel};
use crate::rng::{tag, SplitMix64};
use crate::types::{DatasetRecord, ForwardModel, MeasurementVec, SignalVec};

/// Options shared by all synthesizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Standard deviation of additive Gaussian measurement noise.
    pub noise_std: f64,
    /// Fraction of pulse records that copy an earlier record with a new CEP.
    pub cep_duplicate_rate: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise_std: 0.0,
            cep_duplicate_rate: 0.05,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.cep_duplicate_rate) {
            return Err(Error::Config(
                "noise_std must be non-negative and cep_duplicate_rate in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Signal source for the video system.
#[derive(Debug, Clone, PartialEq)]
pub enum VideoSource {
    /// Procedural colour scenes.
    Synthetic,
    /// 8-bit PNG/PPM images; each frame is a random pick.
    ImageDir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnistSplit {
    #[default]
    Train,
    Test,
}

fn finish(
    fm: &dyn ForwardModel,
    f: Vec<f64>,
    seed: u64,
    index: usize,
    opts: &SynthOptions,
    mut meta: BTreeMap<String, serde_json::Value>,
) -> Result<DatasetRecord> {
    let mut g = fm.apply_flat(&f)?;
    if opts.noise_std > 0.0 {
        let mut rng = SplitMix64::derive(seed, &[tag("meas-noise"), index as u64]);
        for v in &mut g {
            *v += opts.noise_std * rng.normal();
            if fm.nonneg_measurement() {
                *v = v.max(0.0);
            }
        }
        meta.insert("noise_std".into(), json!(opts.noise_std));
    }
    Ok(DatasetRecord {
        f: SignalVec::new(fm.system(), fm.signal_shape(), f)?,
        g: MeasurementVec::new(fm.system(), fm.measurement_shape(), g, fm.nonneg_measurement())?,
        seed: mix_record_seed(seed, index),
        meta,
    })
}

fn mix_record_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::derive(seed, &[tag("record"), index as u64]).next_u64()
}

/// Pulse pairs with random phase coefficients; a fraction of records repeat
/// an earlier pulse with a different constant XUV phase `k0`, which leaves
/// the trace unchanged.
pub fn synth_pulse_dataset(n: usize, seed: u64, cfg: &StreakingConfig, opts: &SynthOptions) -> Result<Dataset> {
    opts.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let model = StreakingModel::new(cfg.clone())?;
    let mut phases: Vec<(PulsePhase, PulsePhase)> = Vec::with_capacity(n);
    let mut metas = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = SplitMix64::derive(seed, &[tag("pulse"), i as u64]);
        let mut meta = BTreeMap::new();
        let dup = i > 0 && rng.bernoulli(opts.cep_duplicate_rate);
        let (xuv, ir) = if dup {
            let j = rng.below(i);
            let (mut xuv, ir) = phases[j];
            let shift = rng.uniform(0.5, 2.0 * std::f64::consts::PI - 0.5);
            xuv.k[0] += shift;
            meta.insert("cep_duplicate_of".into(), json!(crate::dataset::record_id(j)));
            meta.insert("cep_shift".into(), json!(shift));
            (xuv, ir)
        } else {
            model.random_phases(&mut rng)
        };
        meta.insert("xuv_phase".into(), json!(xuv.k));
        meta.insert("ir_phase".into(), json!(ir.k));
        phases.push((xuv, ir));
        metas.push(meta);
    }
    let records = phases
        .par_iter()
        .zip(metas)
        .enumerate()
        .map(|(i, ((xuv, ir), meta))| {
            let f = model.signal_from_phases(xuv, ir)?;
            finish(&model, f, seed, i, opts, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        physics: PhysicsConfig::Streaking(cfg.clone()),
        source: "synthetic".into(),
        seed,
        records,
    })
}

/// A procedural colour image `(y, x, c)` in `[0, 1]`: a two-colour gradient
/// with a few filled discs and rectangles.
pub fn procedural_image(rng: &mut SplitMix64, n: usize, channels: usize) -> Vec<f64> {
    let color = |rng: &mut SplitMix64| -> Vec<f64> { (0..channels).map(|_| rng.uniform(0.05, 0.95)).collect() };
    let c0 = color(rng);
    let c1 = color(rng);
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![0.0; n * n * channels];
    let nf = n as f64;
    for y in 0..n {
        for x in 0..n {
            let t = (0.5 + ((x as f64 / nf - 0.5) * dx + (y as f64 / nf - 0.5) * dy)).clamp(0.0, 1.0);
            for c in 0..channels {
                img[(y * n + x) * channels + c] = (1.0 - t) * c0[c] + t * c1[c];
            }
        }
    }
    let shapes = 3 + rng.below(4);
    for _ in 0..shapes {
        let col = color(rng);
        let cx = rng.uniform(0.0, nf);
        let cy = rng.uniform(0.0, nf);
        let r = rng.uniform(0.08, 0.25) * nf;
        let disc = rng.bernoulli(0.5);
        for y in 0..n {
            for x in 0..n {
                let (ux, uy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    ux * ux + uy * uy <= r * r
                } else {
                    ux.abs() <= r && uy.abs() <= 0.6 * r
                };
                if inside {
                    for c in 0..channels {
                        img[(y * n + x) * channels + c] = col[c];
                    }
                }
            }
        }
    }
    img
}

fn to_channels(rgb: &[f64], channels: usize) -> Vec<f64> {
    match channels {
        3 => rgb.to_vec(),
        1 => rgb
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
        c => rgb
            .chunks(3)
            .flat_map(|p| (0..c).map(move |i| p[i % 3]))
            .collect(),
    }
}

/// Four-frame (by default) scenes compressed with the configured masks.
pub fn synth_video_dataset(
    source: &VideoSource,
    n: usize,
    seed: u64,
    cfg: &VideoCsConfig,
    opts: &SynthOptions,
) -> Result<Dataset> {
    opts.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let model = VideoCsModel::new(cfg.clone())?;
    let (side, ch, frames) = (cfg.n, cfg.channels, cfg.frames);
    let pool: Vec<Vec<f64>> = match source {
        VideoSource::Synthetic => Vec::new(),
        VideoSource::ImageDir(dir) => {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::MissingFile(dir.join("*.png")));
            }
            files
                .iter()
                .map(|p| Ok(to_channels(&square_resize(&read_rgb(p)?, side).data, ch)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SplitMix64::derive(seed, &[tag("video"), i as u64]);
            let mut meta = BTreeMap::new();
            let mut picks = Vec::new();
            let imgs: Vec<Vec<f64>> = (0..frames)
                .map(|k| {
                    if pool.is_empty() {
                        let mut r = SplitMix64::derive(seed, &[tag("frame"), i as u64, k as u64]);
                        procedural_image(&mut r, side, ch)
                    } else {
                        let j = rng.below(pool.len());
                        picks.push(j);
                        pool[j].clone()
                    }
                })
                .collect();
            if !picks.is_empty() {
                meta.insert("images".into(), json!(picks));
            }
            let mut f = vec![0.0; side * side * ch * frames];
            for p in 0..side * side {
                for c in 0..ch {
                    for k in 0..frames {
                        f[(p * ch + c) * frames + k] = imgs[k][p * ch + c];
                    }
                }
            }
            finish(&model, f, seed, i, opts, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        physics: PhysicsConfig::VideoCs(cfg.clone()),
        source: match source {
            VideoSource::Synthetic => "synthetic".into(),
            VideoSource::ImageDir(d) => format!("images:{}", d.display()),
        },
        seed,
        records,
    })
}

/// Zero-pads a digit (bytes, `rows x cols`) into the middle of an `n x n`
/// object with values in `[0, 1]`. Digits larger than the frame are shrunk.
pub fn digit_object(pixels: &[u8], rows: usize, cols: usize, n: usize) -> Vec<f64> {
    let (h, w, src) = if rows <= n && cols <= n {
        (rows, cols, pixels.to_vec())
    } else {
        // Larger than the frame: shrink to fit.
        let gray = image::GrayImage::from_raw(cols as u32, rows as u32, pixels.to_vec()).expect("digit size");
        let small = image::imageops::resize(&gray, n as u32, n as u32, image::imageops::FilterType::Triangle);
        (n, n, small.into_raw())
    };
    let (oy, ox) = ((n - h) / 2, (n - w) / 2);
    let mut obj = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            obj[(y + oy) * n + x + ox] = src[y * w + x] as f64 / 255.0;
        }
    }
    obj
}

/// In-line holograms of MNIST digits. Record `i` uses digit `perm[i]` of
/// a seeded permutation of the split.
pub fn synth_hologram_dataset(
    mnist_dir: &Path,
    split: MnistSplit,
    n: usize,
    seed: u64,
    cfg: &FresnelConfig,
    opts: &SynthOptions,
) -> Result<Dataset> {
    let digits = images_in(mnist_dir, split == MnistSplit::Train)?;
    synth_hologram_from(&digits, split, n, seed, cfg, opts)
}

pub fn synth_hologram_from(
    digits: &MnistImages,
    split: MnistSplit,
    n: usize,
    seed: u64,
    cfg: &FresnelConfig,
    opts: &SynthOptions,
) -> Result<Dataset> {
    opts.validate()?;
    if n == 0 || digits.count == 0 {
        return Err(Error::Config("dataset size and digit count must be at least 1".into()));
    }
    let model = FresnelModel::new(cfg.clone())?;
    let mut perm: Vec<usize> = (0..digits.count).collect();
    SplitMix64::derive(seed, &[tag("mnist")]).shuffle(&mut perm);
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = perm[i % digits.count];
            let f = digit_object(digits.image(d), digits.rows, digits.cols, cfg.n);
            let mut meta = BTreeMap::new();
            meta.insert("digit_index".into(), json!(d));
            finish(&model, f, seed, i, opts, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        physics: PhysicsConfig::Hologram(cfg.clone()),
        source: match split {
            MnistSplit::Train => "mnist:train".into(),
            MnistSplit::Test => "mnist:test".into(),
        },
        seed,
        records,
    })
}

/// Hologram intensity of a real object, as synthesized.
pub fn hologram_of(model: &FresnelModel, f: &[f64]) -> Result<Vec<f64>> {
    let e = model.propagate(&Field::real(f.to_vec()))?;
    Ok(FresnelModel::intensity(&e, model.config().a_ref))
}

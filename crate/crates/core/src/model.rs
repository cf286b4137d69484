//! Recurrent conditional variational model and the two learned baselines
//! that share its topology.
//!
//! Every network works in normalized units: measurement residuals are
//! divided by the training-set `g_std`, signal residuals by `f_std`, and the
//! decoder emits increments in units of `f_std`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvShape, Graph, ParamGrads, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{set_forget_bias, Conv, Init, Linear};
use crate::physics::{FresnelModel, PhysicsConfig};
use crate::rng::{tag, SplitMix64};
use crate::types::{ForwardModel, SignalVec, SystemId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Variational,
    Deterministic,
    PhysicsInformed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Variational, Method::Deterministic, Method::PhysicsInformed];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Variational => "variational",
            Method::Deterministic => "deterministic",
            Method::PhysicsInformed => "physics_informed",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// When latent vectors are drawn during an unroll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// A fresh draw at every recurrence; KL terms are summed.
    PerStep,
    /// One draw at the first recurrence, reused afterwards.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub recurrences: usize,
    pub samples_l: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub latent_mode: LatentMode,
    /// Widths of the three stride-2 encoder convolutions.
    pub enc_channels: [usize; 3],
    /// Widths of the two hidden decoder convolutions.
    pub dec_channels: [usize; 2],
    /// Channels the latent vector is mapped to before entering a ConvLSTM.
    pub z_channels: usize,
    /// ConvLSTM channels (video, hologram).
    pub lstm_hidden: usize,
    /// Fully connected LSTM width (streaking).
    pub fc_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            recurrences: 3,
            samples_l: 1,
            gamma: 0.5,
            alpha: 1.0,
            beta: 1.0,
            latent_mode: LatentMode::PerStep,
            enc_channels: [8, 16, 16],
            dec_channels: [16, 8],
            z_channels: 4,
            lstm_hidden: 16,
            fc_hidden: 128,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.latent_dim == 0 || self.recurrences == 0 || self.samples_l == 0 {
            return bad("latent_dim, recurrences and samples_l must be at least 1");
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.z_channels == 0 || self.lstm_hidden == 0 || self.fc_hidden == 0 {
            return bad("z_channels, lstm_hidden and fc_hidden must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    fn latent_draws(&self) -> usize {
        match self.latent_mode {
            LatentMode::PerStep => self.recurrences,
            LatentMode::Once => 1,
        }
    }
}

/// Moments of the back-propagated hologram field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpStats {
    pub re_mean: f64,
    pub re_std: f64,
    pub im_mean: f64,
    pub im_std: f64,
    pub abs_mean: f64,
    pub abs_std: f64,
    /// Pixelwise covariance between `|BP|` and the signal.
    pub abs_f_cov: f64,
}

/// Training-set normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub g_mean: f64,
    pub g_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bp: Option<BpStats>,
}

fn moments<'a>(xs: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0usize, 0.0, 0.0);
    for &x in xs {
        n += 1;
        s += x;
        ss += x * x;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = s / n as f64;
    let var = (ss / n as f64 - mean * mean).max(0.0);
    // Constant data would make the scale degenerate.
    let std = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl Stats {
    pub fn identity() -> Self {
        Stats {
            g_mean: 0.0,
            g_std: 1.0,
            f_mean: 0.0,
            f_std: 1.0,
            bp: None,
        }
    }

    /// Statistics over `(f, g)` pairs; `fresnel` adds back-propagation moments.
    pub fn compute(pairs: &[(&[f64], &[f64])], fresnel: Option<&FresnelModel>) -> Result<Self> {
        let (g_mean, g_std) = moments(pairs.iter().flat_map(|(_, g)| g.iter()));
        let (f_mean, f_std) = moments(pairs.iter().flat_map(|(f, _)| f.iter()));
        let bp = match fresnel {
            None => None,
            Some(fr) => {
                let fields = pairs
                    .iter()
                    .map(|(_, g)| fr.back_propagate_amplitude(g))
                    .collect::<Result<Vec<_>>>()?;
                let (re_mean, re_std) = moments(fields.iter().flat_map(|e| e.re.iter()));
                let (im_mean, im_std) = moments(fields.iter().flat_map(|e| e.im.iter()));
                let abs: Vec<Vec<f64>> = fields.iter().map(|e| e.abs()).collect();
                let (abs_mean, abs_std) = moments(abs.iter().flatten());
                let n: usize = abs.iter().map(|a| a.len()).sum();
                let abs_f_cov = abs
                    .iter()
                    .zip(pairs)
                    .flat_map(|(a, (f, _))| a.iter().zip(f.iter()))
                    .map(|(a, f)| (a - abs_mean) * (f - f_mean))
                    .sum::<f64>()
                    / n.max(1) as f64;
                Some(BpStats {
                    re_mean,
                    re_std,
                    im_mean,
                    im_std,
                    abs_mean,
                    abs_std,
                    abs_f_cov,
                })
            }
        };
        Ok(Stats {
            g_mean,
            g_std,
            f_mean,
            f_std,
            bp,
        })
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw `mean + stddev * noise`; stddev floored at 1e-6.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::Shape(format!(
                "latent noise has {} entries, expected {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.stddev)
            .zip(noise)
            .map(|((m, s), e)| m + s.max(1e-6) * e)
            .collect())
    }
}

/// `KL(q || p)` between diagonal Gaussians.
pub fn kl_divergence(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if q.dim() != p.dim() || q.stddev.len() != q.dim() || p.stddev.len() != p.dim() {
        return Err(Error::Shape(format!(
            "KL between latents of dims {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for j in 0..q.dim() {
        let (sq, sp) = (q.stddev[j], p.stddev[j]);
        let dm = q.mean[j] - p.mean[j];
        kl += (sp / sq).ln() + (dm * dm + sq * sq) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// Standard-normal draws for one training example or retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `samples_l` vectors for the recognition branch, `latent_dim * draws` each.
    pub q: Vec<Vec<f64>>,
    /// Same for the conditional-prior branch.
    pub p: Vec<Vec<f64>>,
}

impl Noise {
    pub fn draw(cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let len = cfg.latent_dim * cfg.latent_draws();
        let q = (0..cfg.samples_l).map(|_| rng.normals(len)).collect();
        let p = (0..cfg.samples_l).map(|_| rng.normals(len)).collect();
        Noise { q, p }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let len = cfg.latent_dim * cfg.latent_draws();
        Noise {
            q: vec![vec![0.0; len]; cfg.samples_l],
            p: vec![vec![0.0; len]; cfg.samples_l],
        }
    }
}

/// What a gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `-ELBO` only.
    Elbo,
    /// `-L_r` only.
    Consistency,
    /// `-(gamma ELBO + (1 - gamma) L_r)`.
    Hybrid,
}

/// Loss components of one example; absent components are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    /// The minimized value.
    pub loss: f64,
    pub elbo: Option<f64>,
    pub kl: Option<f64>,
    pub recon: Option<f64>,
    pub consistency: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone)]
enum Layout {
    Spatial {
        n: usize,
        c_meas: usize,
        c_sig: usize,
        /// `chw[i] = native[meas_to_chw[i]]`, `None` when already CHW.
        meas_to_chw: Option<Arc<Vec<usize>>>,
        sig_to_chw: Option<Arc<Vec<usize>>>,
        chw_to_sig: Option<Arc<Vec<usize>>>,
    },
    Trace {
        n_energy: usize,
        n_delay: usize,
        sig_len: usize,
    },
}

impl Layout {
    fn for_model(fm: &dyn ForwardModel) -> Result<Self> {
        match fm.system() {
            SystemId::Streaking => {
                let m = fm.measurement_shape();
                Ok(Layout::Trace {
                    n_energy: m[0],
                    n_delay: m[1],
                    sig_len: fm.signal_len(),
                })
            }
            SystemId::Hologram => {
                let n = fm.signal_shape()[0];
                if n % 8 != 0 {
                    return Err(Error::Config(format!("grid size {n} must be a multiple of 8")));
                }
                Ok(Layout::Spatial {
                    n,
                    c_meas: 1,
                    c_sig: 1,
                    meas_to_chw: None,
                    sig_to_chw: None,
                    chw_to_sig: None,
                })
            }
            SystemId::VideoCs => {
                let s = fm.signal_shape();
                let (n, c, f) = (s[0], s[2], s[3]);
                if n % 8 != 0 {
                    return Err(Error::Config(format!("grid size {n} must be a multiple of 8")));
                }
                let nn = n * n;
                let mut meas = vec![0; nn * c];
                let mut sig = vec![0; nn * c * f];
                let mut inv = vec![0; nn * c * f];
                for p in 0..nn {
                    for ch in 0..c {
                        meas[ch * nn + p] = p * c + ch;
                        for i in 0..f {
                            let chw = (ch * f + i) * nn + p;
                            let native = (p * c + ch) * f + i;
                            sig[chw] = native;
                            inv[native] = chw;
                        }
                    }
                }
                Ok(Layout::Spatial {
                    n,
                    c_meas: c,
                    c_sig: c * f,
                    meas_to_chw: Some(Arc::new(meas)),
                    sig_to_chw: Some(Arc::new(sig)),
                    chw_to_sig: Some(Arc::new(inv)),
                })
            }
        }
    }
}

fn permute(g: &Graph, x: Var, idx: &Option<Arc<Vec<usize>>>) -> Var {
    match idx {
        Some(i) => g.gather(x, i.clone()),
        None => x,
    }
}

#[derive(Debug, Clone)]
struct ConvStack(Vec<Conv>);

impl ConvStack {
    /// Stride-2 3x3 convolutions with ReLU.
    fn encoder(store: &mut ParamStore, seed: u64, name: &str, c_in: usize, h: usize, w: usize, widths: &[usize]) -> Self {
        let (mut c, mut h, mut w) = (c_in, h, w);
        let mut layers = Vec::new();
        for (i, &c_out) in widths.iter().enumerate() {
            let shape = ConvShape {
                c_in: c,
                h,
                w,
                c_out,
                k: 3,
                stride: 2,
                pad: 1,
            };
            layers.push(Conv::new(store, seed, &format!("{name}.conv{i}"), shape, Init::He));
            (c, h, w) = (c_out, shape.out_h(), shape.out_w());
        }
        ConvStack(layers)
    }

    fn out_len(&self) -> usize {
        self.0.last().map(|c| c.out_len()).unwrap_or(0)
    }

    fn forward(&self, g: &Graph, s: &ParamStore, mut x: Var) -> Var {
        for c in &self.0 {
            x = g.relu(c.forward(g, s, x));
        }
        x
    }
}

#[derive(Debug, Clone)]
enum Cell {
    /// Gates from a 3x3 convolution over `[input; h]` on an `s x s` grid.
    Conv { conv: Conv, hidden_len: usize },
    Fc { lin: Linear, hidden_len: usize },
}

impl Cell {
    fn hidden_len(&self) -> usize {
        match self {
            Cell::Conv { hidden_len, .. } | Cell::Fc { hidden_len, .. } => *hidden_len,
        }
    }

    fn step(&self, g: &Graph, s: &ParamStore, input: Var, h: Var, c: Var) -> (Var, Var) {
        let x = g.concat(&[input, h]);
        let gates = match self {
            Cell::Conv { conv, .. } => conv.forward(g, s, x),
            Cell::Fc { lin, .. } => lin.forward(g, s, x),
        };
        crate::nn::lstm_update(g, gates, c, self.hidden_len())
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    /// Upsample + conv, three times, from the `(hidden, s, s)` state.
    Spatial { convs: Vec<Conv> },
    Fc { l1: Linear, l2: Linear },
}

impl Decoder {
    fn forward(&self, g: &Graph, s: &ParamStore, h: Var) -> Var {
        match self {
            Decoder::Spatial { convs } => {
                let mut x = h;
                for (i, conv) in convs.iter().enumerate() {
                    let sh = conv.shape;
                    x = g.upsample2(x, sh.c_in, sh.h / 2, sh.w / 2);
                    x = conv.forward(g, s, x);
                    if i + 1 < convs.len() {
                        x = g.relu(x);
                    }
                }
                x
            }
            Decoder::Fc { l1, l2 } => {
                let x = g.relu(l1.forward(g, s, h));
                l2.forward(g, s, x)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    enc_p: ConvStack,
    head_p: Option<Linear>,
    /// Recognition encoder over the measurement residual (spatial systems
    /// also stack the signal residual as extra channels here).
    enc_q: Option<ConvStack>,
    /// Recognition encoder over the 1-D signal residual (streaking).
    enc_q_sig: Option<ConvStack>,
    head_q: Option<Linear>,
    zmap: Option<Linear>,
    cell: Cell,
    dec: Decoder,
    pi_affine: Option<(usize, usize)>,
}

impl Net {
    fn build(store: &mut ParamStore, cfg: &ModelConfig, method: Method, layout: &Layout) -> Self {
        let seed = cfg.seed;
        let m = cfg.latent_dim;
        let variational = method == Method::Variational;
        match *layout {
            Layout::Spatial { n, c_meas, c_sig, .. } => {
                let c_in = if method == Method::PhysicsInformed { 2 } else { c_meas };
                let enc_p = ConvStack::encoder(store, seed, "enc_p", c_in, n, n, &cfg.enc_channels);
                let feat = enc_p.out_len();
                let s = n / 8;
                let e2 = cfg.enc_channels[2];
                let hid = cfg.lstm_hidden;
                let (head_p, enc_q, head_q, zmap, zc) = if variational {
                    let enc_q = ConvStack::encoder(store, seed, "enc_q", c_meas + c_sig, n, n, &cfg.enc_channels);
                    (
                        Some(Linear::new(store, seed, "head_p", feat, 2 * m, Init::Lecun)),
                        Some(enc_q.clone()),
                        Some(Linear::new(store, seed, "head_q", enc_q.out_len(), 2 * m, Init::Lecun)),
                        Some(Linear::new(store, seed, "zmap", m, cfg.z_channels * s * s, Init::Lecun)),
                        cfg.z_channels,
                    )
                } else {
                    (None, None, None, None, 0)
                };
                let cell_shape = ConvShape {
                    c_in: e2 + zc + hid,
                    h: s,
                    w: s,
                    c_out: 4 * hid,
                    k: 3,
                    stride: 1,
                    pad: 1,
                };
                let conv = Conv::new(store, seed, "lstm", cell_shape, Init::Lecun);
                set_forget_bias(store, conv.b, hid, 1, 1.0);
                let widths = [cfg.dec_channels[0], cfg.dec_channels[1], c_sig];
                let mut convs = Vec::new();
                let (mut c, mut side) = (hid, s);
                for (i, &c_out) in widths.iter().enumerate() {
                    side *= 2;
                    let shape = ConvShape {
                        c_in: c,
                        h: side,
                        w: side,
                        c_out,
                        k: 3,
                        stride: 1,
                        pad: 1,
                    };
                    let init = if i == 2 { Init::Zero } else { Init::He };
                    convs.push(Conv::new(store, seed, &format!("dec.conv{i}"), shape, init));
                    c = c_out;
                }
                let pi_affine = (method == Method::PhysicsInformed).then(|| {
                    let a = store.add("pi.a", vec![1], vec![0.0]);
                    let b = store.add("pi.b", vec![1], vec![0.0]);
                    (a, b)
                });
                Net {
                    enc_p,
                    head_p,
                    enc_q,
                    enc_q_sig: None,
                    head_q,
                    zmap,
                    cell: Cell::Conv {
                        conv,
                        hidden_len: hid * s * s,
                    },
                    dec: Decoder::Spatial { convs },
                    pi_affine,
                }
            }
            Layout::Trace {
                n_energy,
                n_delay,
                sig_len,
            } => {
                let enc_p = ConvStack::encoder(store, seed, "enc_p", 1, n_energy, n_delay, &cfg.enc_channels);
                let feat = enc_p.out_len();
                let hid = cfg.fc_hidden;
                let zlen = 2 * m;
                let (head_p, enc_q, enc_q_sig, head_q, zmap, zl) = if variational {
                    let enc_q = ConvStack::encoder(store, seed, "enc_q", 1, n_energy, n_delay, &cfg.enc_channels);
                    let enc_q_sig = ConvStack::encoder(store, seed, "enc_q_sig", 1, 1, sig_len, &cfg.enc_channels);
                    let qlen = enc_q.out_len() + enc_q_sig.out_len();
                    (
                        Some(Linear::new(store, seed, "head_p", feat, 2 * m, Init::Lecun)),
                        Some(enc_q),
                        Some(enc_q_sig),
                        Some(Linear::new(store, seed, "head_q", qlen, 2 * m, Init::Lecun)),
                        Some(Linear::new(store, seed, "zmap", m, zlen, Init::Lecun)),
                        zlen,
                    )
                } else {
                    (None, None, None, None, None, 0)
                };
                let lin = Linear::new(store, seed, "lstm", feat + zl + hid, 4 * hid, Init::Lecun);
                set_forget_bias(store, lin.b, hid, 1, 1.0);
                let l1 = Linear::new(store, seed, "dec.fc0", hid, 2 * hid, Init::He);
                let l2 = Linear::new(store, seed, "dec.fc1", 2 * hid, sig_len, Init::Zero);
                Net {
                    enc_p,
                    head_p,
                    enc_q,
                    enc_q_sig,
                    head_q,
                    zmap,
                    cell: Cell::Fc { lin, hidden_len: hid },
                    dec: Decoder::Fc { l1, l2 },
                    pi_affine: None,
                }
            }
        }
    }
}

/// Graph nodes of a latent Gaussian: mean and log-variance.
struct LatentVars {
    mean: Var,
    logvar: Var,
}

fn split_head(g: &Graph, out: Var, m: usize) -> LatentVars {
    LatentVars {
        mean: g.slice(out, 0, m),
        logvar: g.clamp(g.slice(out, m, m), -10.0, 10.0),
    }
}

fn graph_sample(g: &Graph, lat: &LatentVars, eps: &[f64]) -> Var {
    let std = g.exp(g.scale(lat.logvar, 0.5));
    g.add(lat.mean, g.mul(std, g.constant(eps.to_vec())))
}

fn graph_kl(g: &Graph, q: &LatentVars, p: &LatentVars) -> Var {
    // sum 0.5 (lv_p - lv_q) + 0.5 exp(lv_q - lv_p) + 0.5 (mu_q - mu_p)^2 exp(-lv_p) - 0.5
    let t1 = g.sub(p.logvar, q.logvar);
    let t2 = g.exp(g.sub(q.logvar, p.logvar));
    let dm = g.sub(q.mean, p.mean);
    let t3 = g.mul(g.square(dm), g.exp(g.scale(p.logvar, -1.0)));
    let s = g.add(g.add(t1, t2), t3);
    let len = g.len(s) as f64;
    g.add_scalar(g.scale(g.sum(s), 0.5), -0.5 * len)
}

fn latent_of(g: &Graph, lat: &LatentVars) -> GaussianLatent {
    GaussianLatent {
        mean: g.value(lat.mean).to_vec(),
        stddev: g.value(lat.logvar).iter().map(|v| (0.5 * v).exp()).collect(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    Inference,
    Retrieval,
}

struct Unrolled {
    f: Var,
    deltas: Vec<Var>,
    kl: Option<Var>,
}

/// A model with its parameters, normalization and physics.
#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    method: Method,
    physics: PhysicsConfig,
    stats: Stats,
    params: ParamStore,
    net: Net,
    layout: Layout,
    fm: Arc<dyn ForwardModel>,
    fresnel: Option<FresnelModel>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("method", &self.method)
            .field("system", &self.fm.system())
            .field("params", &self.params.total_len())
            .finish()
    }
}

impl Model {
    /// Freshly initialized model; weights depend only on `cfg.seed`.
    pub fn new(cfg: ModelConfig, method: Method, physics: PhysicsConfig, stats: Stats) -> Result<Self> {
        let fm = physics.build()?;
        Self::with_forward_model(cfg, method, physics, stats, fm)
    }

    /// As [`Model::new`] but with an already built forward model, which must
    /// match `physics` (e.g. a video model with custom masks).
    pub fn with_forward_model(
        cfg: ModelConfig,
        method: Method,
        physics: PhysicsConfig,
        stats: Stats,
        fm: Arc<dyn ForwardModel>,
    ) -> Result<Self> {
        cfg.validate()?;
        physics.validate()?;
        if fm.system() != physics.system() {
            return Err(Error::SystemMismatch {
                expected: physics.system(),
                found: fm.system(),
            });
        }
        let fresnel = match (&physics, method) {
            (PhysicsConfig::Hologram(c), Method::PhysicsInformed) => Some(FresnelModel::new(c.clone())?),
            (_, Method::PhysicsInformed) => {
                return Err(Error::Unsupported(format!(
                    "the physics-informed network needs the hologram system, not {}",
                    physics.system()
                )))
            }
            _ => None,
        };
        if method == Method::PhysicsInformed && stats.bp.is_none() {
            return Err(Error::Config("physics-informed model needs back-propagation statistics".into()));
        }
        let layout = Layout::for_model(fm.as_ref())?;
        let mut params = ParamStore::new();
        let net = Net::build(&mut params, &cfg, method, &layout);
        if let (Some((a, b)), Some(bp)) = (net.pi_affine, stats.bp) {
            // Least-squares fit of f on standardized |BP| over the training pixels.
            params.set(a, vec![bp.abs_f_cov / bp.abs_std]);
            params.set(b, vec![stats.f_mean]);
        }
        Ok(Model {
            cfg,
            method,
            physics,
            stats,
            params,
            net,
            layout,
            fm,
            fresnel,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn physics(&self) -> &PhysicsConfig {
        &self.physics
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn system(&self) -> SystemId {
        self.fm.system()
    }

    pub fn forward_model(&self) -> &Arc<dyn ForwardModel> {
        &self.fm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces parameter values by name; shapes must match.
    pub fn load_params(&mut self, named: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!(
                "artifact has {} parameter tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, shape, data) in named {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            if self.params.shape(id) != shape.as_slice() || data.len() != self.params.value(id).len() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {shape:?}, expected {:?}",
                    self.params.shape(id)
                )));
            }
            self.params.set(id, data);
        }
        Ok(())
    }

    fn check_state(&self) -> Result<()> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(Error::State("model parameters contain non-finite values".into()))
        }
    }

    fn check_pair(&self, f: Option<&[f64]>, g: &[f64]) -> Result<()> {
        self.fm.check_measurement_len(g.len())?;
        if let Some(f) = f {
            self.fm.check_signal_len(f.len())?;
        }
        Ok(())
    }

    /// Normalized measurement-side input at one recurrence, in network
    /// layout. The feedback `g - A(f_prev)` stays in the graph.
    fn meas_input(&self, g: &Graph, meas: &[f64], f_prev: Option<Var>) -> Result<Var> {
        let st = &self.stats;
        let x = match f_prev {
            None => g.constant(meas.iter().map(|v| (v - st.g_mean) / st.g_std).collect()),
            Some(f) => {
                let a = g.forward_model(f, self.fm.as_ref())?;
                let r = g.sub(g.constant(meas.to_vec()), a);
                g.scale(r, 1.0 / st.g_std)
            }
        };
        Ok(match &self.layout {
            Layout::Spatial { meas_to_chw, .. } => permute(g, x, meas_to_chw),
            Layout::Trace { .. } => x,
        })
    }

    fn prior_head(&self, g: &Graph, feat: Var) -> LatentVars {
        let head = self.net.head_p.as_ref().expect("variational head");
        split_head(g, head.forward(g, &self.params, feat), self.cfg.latent_dim)
    }

    fn recognition(&self, g: &Graph, meas_in: Var, f: &[f64], f_prev: Option<Var>) -> LatentVars {
        let s = &self.params;
        let target = g.constant(f.iter().map(|a| a / self.stats.f_std).collect());
        let sig = match f_prev {
            Some(p) => g.sub(target, g.scale(p, 1.0 / self.stats.f_std)),
            None => target,
        };
        let enc_q = self.net.enc_q.as_ref().expect("recognition encoder");
        let feat = match (&self.layout, &self.net.enc_q_sig) {
            (Layout::Spatial { sig_to_chw, .. }, _) => {
                let x = g.concat(&[meas_in, permute(g, sig, sig_to_chw)]);
                enc_q.forward(g, s, x)
            }
            (Layout::Trace { .. }, Some(sig_enc)) => {
                let a = enc_q.forward(g, s, meas_in);
                let b = sig_enc.forward(g, s, sig);
                g.concat(&[a, b])
            }
            (Layout::Trace { .. }, None) => unreachable!("streaking recognition encoder"),
        };
        let head = self.net.head_q.as_ref().expect("recognition head");
        split_head(g, head.forward(g, s, feat), self.cfg.latent_dim)
    }

    fn to_native(&self, g: &Graph, x: Var) -> Var {
        match &self.layout {
            Layout::Spatial { chw_to_sig, .. } => permute(g, x, chw_to_sig),
            Layout::Trace { .. } => x,
        }
    }

    /// Variational unroll. `f_true` is required for the inference branch.
    fn unroll(&self, g: &Graph, meas: &[f64], f_true: Option<&[f64]>, eps: &[f64], branch: Branch) -> Result<Unrolled> {
        let s = &self.params;
        let m = self.cfg.latent_dim;
        let hl = self.net.cell.hidden_len();
        let (mut h, mut c) = (g.constant(vec![0.0; hl]), g.constant(vec![0.0; hl]));
        let mut f_cur: Option<Var> = None;
        let mut deltas = Vec::with_capacity(self.cfg.recurrences);
        let mut kl: Option<Var> = None;
        let mut z_once: Option<Var> = None;
        for t in 0..self.cfg.recurrences {
            let meas_in = self.meas_input(g, meas, f_cur)?;
            let feat = self.net.enc_p.forward(g, s, meas_in);
            let z = match (self.cfg.latent_mode, z_once) {
                (LatentMode::Once, Some(z)) => z,
                _ => {
                    let draw = if self.cfg.latent_mode == LatentMode::Once { 0 } else { t };
                    let e = &eps[draw * m..(draw + 1) * m];
                    let p = self.prior_head(g, feat);
                    let z = match branch {
                        Branch::Retrieval => graph_sample(g, &p, e),
                        Branch::Inference => {
                            let q = self.recognition(g, meas_in, f_true.expect("inference target"), f_cur);
                            let k = graph_kl(g, &q, &p);
                            kl = Some(match kl {
                                Some(acc) => g.add(acc, k),
                                None => k,
                            });
                            graph_sample(g, &q, e)
                        }
                    };
                    z_once = Some(z);
                    z
                }
            };
            let zf = self.net.zmap.as_ref().expect("latent map").forward(g, s, z);
            let input = g.concat(&[feat, zf]);
            (h, c) = self.net.cell.step(g, s, input, h, c);
            let d = g.scale(self.to_native(g, self.net.dec.forward(g, s, h)), self.stats.f_std);
            deltas.push(d);
            f_cur = Some(match f_cur {
                Some(f) => g.add(f, d),
                None => d,
            });
        }
        Ok(Unrolled {
            f: f_cur.expect("at least one recurrence"),
            deltas,
            kl,
        })
    }

    /// Deterministic or physics-informed single pass.
    fn unroll_point(&self, g: &Graph, meas: &[f64]) -> Result<Unrolled> {
        let s = &self.params;
        let hl = self.net.cell.hidden_len();
        let (mut h, mut c) = (g.constant(vec![0.0; hl]), g.constant(vec![0.0; hl]));
        let (input, mut f_cur) = match self.method {
            Method::PhysicsInformed => {
                let fr = self.fresnel.as_ref().expect("fresnel model");
                let bp = self.stats.bp.expect("bp stats");
                let e = fr.back_propagate_amplitude(meas)?;
                let mut planes: Vec<f64> = e.re.iter().map(|v| (v - bp.re_mean) / bp.re_std).collect();
                planes.extend(e.im.iter().map(|v| (v - bp.im_mean) / bp.im_std));
                let (a, b) = self.net.pi_affine.expect("affine head");
                let abs = g.constant(e.abs().iter().map(|v| (v - bp.abs_mean) / bp.abs_std).collect());
                let skip = g.add_scalar_var(g.mul_scalar_var(abs, g.param(s, a)), g.param(s, b));
                (g.constant(planes), Some(skip))
            }
            _ => (self.meas_input(g, meas, None)?, None),
        };
        let feat = self.net.enc_p.forward(g, s, input);
        let mut deltas = Vec::new();
        for _ in 0..self.cfg.recurrences {
            (h, c) = self.net.cell.step(g, s, feat, h, c);
            let d = g.scale(self.to_native(g, self.net.dec.forward(g, s, h)), self.stats.f_std);
            deltas.push(d);
            f_cur = Some(match f_cur {
                Some(f) => g.add(f, d),
                None => d,
            });
        }
        Ok(Unrolled {
            f: f_cur.expect("at least one recurrence"),
            deltas,
            kl: None,
        })
    }

    fn sq_err(&self, g: &Graph, x: Var, target: &[f64], scale: f64) -> Var {
        g.scale(g.sum_sq(g.sub(x, g.constant(target.to_vec()))), 1.0 / (scale * scale))
    }

    fn build_loss(&self, g: &Graph, f: &[f64], meas: &[f64], noise: &Noise, obj: Objective) -> Result<(Var, LossTerms)> {
        self.check_pair(Some(f), meas)?;
        if self.method != Method::Variational {
            let u = self.unroll_point(g, meas)?;
            let mse = g.scale(self.sq_err(g, u.f, f, self.stats.f_std), 1.0 / f.len() as f64);
            let v = g.scalar(mse);
            let terms = LossTerms {
                loss: v,
                mse: Some(v),
                ..Default::default()
            };
            return Ok((mse, terms));
        }
        let cfg = &self.cfg;
        if noise.q.len() != cfg.samples_l || noise.p.len() != cfg.samples_l {
            return Err(Error::Shape(format!("expected {} noise draws per branch", cfg.samples_l)));
        }
        let l = cfg.samples_l as f64;
        let want_elbo = obj != Objective::Consistency;
        let want_cons = obj != Objective::Elbo;
        let mut terms = LossTerms::default();
        let mut elbo = None;
        if want_elbo {
            let mut kl_sum: Option<Var> = None;
            let mut rec_sum: Option<Var> = None;
            for eps in &noise.q {
                let u = self.unroll(g, meas, Some(f), eps, Branch::Inference)?;
                let k = u.kl.expect("inference KL");
                let r = self.sq_err(g, u.f, f, self.stats.f_std);
                kl_sum = Some(kl_sum.map_or(k, |a| g.add(a, k)));
                rec_sum = Some(rec_sum.map_or(r, |a| g.add(a, r)));
            }
            let kl = g.scale(kl_sum.unwrap(), 1.0 / l);
            let rec = g.scale(rec_sum.unwrap(), 1.0 / (cfg.beta * l));
            let e = g.scale(g.add(kl, rec), -1.0);
            terms.kl = Some(g.scalar(kl));
            terms.recon = Some(g.scalar(rec));
            terms.elbo = Some(g.scalar(e));
            elbo = Some(e);
        }
        let mut cons = None;
        if want_cons {
            let mut acc: Option<Var> = None;
            for eps in &noise.p {
                let u = self.unroll(g, meas, None, eps, Branch::Retrieval)?;
                let a = g.forward_model(u.f, self.fm.as_ref())?;
                let r = self.sq_err(g, a, meas, self.stats.g_std);
                acc = Some(acc.map_or(r, |x| g.add(x, r)));
            }
            let c = g.scale(acc.unwrap(), -1.0 / (cfg.alpha * l));
            terms.consistency = Some(g.scalar(c));
            cons = Some(c);
        }
        let objective = match obj {
            Objective::Elbo => elbo.unwrap(),
            Objective::Consistency => cons.unwrap(),
            Objective::Hybrid => g.add(g.scale(elbo.unwrap(), cfg.gamma), g.scale(cons.unwrap(), 1.0 - cfg.gamma)),
        };
        let loss = g.scale(objective, -1.0);
        terms.loss = g.scalar(loss);
        Ok((loss, terms))
    }

    /// Loss components of one example without gradients.
    pub fn loss(&self, f: &[f64], meas: &[f64], noise: &Noise, obj: Objective) -> Result<LossTerms> {
        let g = Graph::new();
        Ok(self.build_loss(&g, f, meas, noise, obj)?.1)
    }

    /// Loss components and the gradient of `terms.loss` for every parameter.
    pub fn loss_and_grad(&self, f: &[f64], meas: &[f64], noise: &Noise, obj: Objective) -> Result<(LossTerms, ParamGrads)> {
        let g = Graph::new();
        let (loss, terms) = self.build_loss(&g, f, meas, noise, obj)?;
        Ok((terms, g.backward(loss, self.params.len())))
    }

    fn require_variational(&self) -> Result<()> {
        if self.method == Method::Variational {
            Ok(())
        } else {
            Err(Error::Unsupported(format!("{} model has no latent space", self.method)))
        }
    }

    /// Conditional prior at the first recurrence.
    pub fn prior_encode(&self, meas: &[f64]) -> Result<GaussianLatent> {
        self.require_variational()?;
        self.check_pair(None, meas)?;
        let g = Graph::new();
        let x = self.meas_input(&g, meas, None)?;
        let feat = self.net.enc_p.forward(&g, &self.params, x);
        Ok(latent_of(&g, &self.prior_head(&g, feat)))
    }

    /// Recognition distribution at the first recurrence.
    pub fn recognition_encode(&self, f: &[f64], meas: &[f64]) -> Result<GaussianLatent> {
        self.require_variational()?;
        self.check_pair(Some(f), meas)?;
        let g = Graph::new();
        let x = self.meas_input(&g, meas, None)?;
        Ok(latent_of(&g, &self.recognition(&g, x, f, None)))
    }

    /// Retrieval-branch unroll with explicit noise (`latent_dim * draws`);
    /// returns the per-recurrence increments.
    pub fn retrieval_increments(&self, meas: &[f64], eps: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.require_variational()?;
        self.check_pair(None, meas)?;
        let need = self.cfg.latent_dim * self.cfg.latent_draws();
        if eps.len() != need {
            return Err(Error::Shape(format!("expected {need} latent noise values, got {}", eps.len())));
        }
        let g = Graph::new();
        let u = self.unroll(&g, meas, None, eps, Branch::Retrieval)?;
        Ok(u.deltas.iter().map(|d| g.value(*d).to_vec()).collect())
    }

    /// Inference-branch unroll given the true signal; returns the
    /// per-recurrence increments and the summed KL.
    pub fn inference_increments(&self, f: &[f64], meas: &[f64], eps: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
        self.require_variational()?;
        self.check_pair(Some(f), meas)?;
        let need = self.cfg.latent_dim * self.cfg.latent_draws();
        if eps.len() != need {
            return Err(Error::Shape(format!("expected {need} latent noise values, got {}", eps.len())));
        }
        let g = Graph::new();
        let u = self.unroll(&g, meas, Some(f), eps, Branch::Inference)?;
        let kl = g.scalar(u.kl.expect("inference KL"));
        Ok((u.deltas.iter().map(|d| g.value(*d).to_vec()).collect(), kl))
    }

    fn signal(&self, data: Vec<f64>) -> Result<SignalVec> {
        SignalVec::new(self.system(), self.fm.signal_shape(), data)
    }

    /// `n` reconstructions from independent prior draws, reproducible by seed.
    pub fn retrieve_instances(&self, meas: &[f64], n: usize, seed: u64) -> Result<Vec<SignalVec>> {
        self.require_variational()?;
        self.check_state()?;
        self.check_pair(None, meas)?;
        let len = self.cfg.latent_dim * self.cfg.latent_draws();
        (0..n)
            .map(|k| {
                let eps = SplitMix64::derive(seed, &[tag("instance"), k as u64]).normals(len);
                let g = Graph::new();
                let u = self.unroll(&g, meas, None, &eps, Branch::Retrieval)?;
                self.signal(g.value(u.f).to_vec())
            })
            .collect()
    }

    /// Point estimate of the deterministic or physics-informed network.
    pub fn deterministic_forward(&self, meas: &[f64]) -> Result<SignalVec> {
        if self.method == Method::Variational {
            return Err(Error::Unsupported("variational model has no point estimate".into()));
        }
        self.check_state()?;
        self.check_pair(None, meas)?;
        let g = Graph::new();
        let u = self.unroll_point(&g, meas)?;
        self.signal(g.value(u.f).to_vec())
    }

    /// Changes the epoch budget, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.cfg.epochs = epochs;
        Ok(())
    }

    /// `n` reconstructions; point-estimate methods repeat their single output.
    pub fn reconstruct(&self, meas: &[f64], n: usize, seed: u64) -> Result<Vec<SignalVec>> {
        match self.method {
            Method::Variational => self.retrieve_instances(meas, n, seed),
            _ => {
                let f = self.deterministic_forward(meas)?;
                Ok(vec![f; n])
            }
        }
    }
}

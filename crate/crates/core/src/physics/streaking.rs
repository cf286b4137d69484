//! Attosecond streaking: XUV photoionization dressed by an IR field.
//!
//! Everything inside runs in atomic units (hbar = 1). The signal packs the
//! complex XUV and IR spectra as `[Re X, Im X, Re R, Im R]` and the
//! measurement is the photoelectron spectrogram `I(K, tau)` stored as
//! `[n_energy, n_delay]`.
//!
//! The XUV time field is a direct Fourier sum over its spectral samples. That
//! sum repeats with period `2 pi / d_omega`, so it is multiplied by a window
//! that is flat over the central half period and tapers to zero (cos^2) at
//! half a period. The IR field is summed over the whole time lattice.
//!
//! The vector potential defaults to `A(t) = -int_t^inf E_IR`. Setting
//! [`VectorPotentialMode::Derivative`] uses `A = -dE_IR/dt` instead.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cumint_to_end, cumint_to_end_adjoint, sin_cos};
use crate::rng::SplitMix64;
use crate::tensor_file;
use crate::types::{ForwardModel, Pullback, SignalVec, SystemId};

pub const HARTREE_EV: f64 = 27.211386;
pub const AU_TIME_AS: f64 = 24.18884;
pub const AU_TIME_FS: f64 = AU_TIME_AS * 1e-3;

pub fn ev_to_au(ev: f64) -> f64 {
    ev / HARTREE_EV
}

pub fn fs_to_au(fs: f64) -> f64 {
    fs / AU_TIME_FS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorPotentialMode {
    /// `A(t) = -int_t^{t_max} E_IR dt'`.
    Integral,
    /// `A(t) = -dE_IR/dt`.
    Derivative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreakingConfig {
    pub energy_min_ev: f64,
    pub energy_max_ev: f64,
    pub n_energy: usize,
    pub delay_min_fs: f64,
    pub delay_max_fs: f64,
    pub n_delay: usize,
    pub n_xuv: usize,
    pub n_ir: usize,
    pub ionization_potential_ev: f64,
    pub dipole: f64,
    /// IR band: `n_ir` samples spanning `ir_span_ev` around `ir_center_ev`.
    pub ir_center_ev: f64,
    pub ir_span_ev: f64,
    pub ir_fwhm_ev: f64,
    pub xuv_fwhm_ev: f64,
    /// Power spectra; `None` means the Gaussian defaults above.
    pub xuv_amp_spectrum: Option<Vec<f64>>,
    pub ir_amp_spectrum: Option<Vec<f64>>,
    /// Integration steps between adjacent delays.
    pub steps_per_delay: usize,
    /// Time lattice extends this far beyond the delay range on each side.
    pub time_margin_fs: f64,
    pub ir_field_scale: f64,
    pub vector_potential: VectorPotentialMode,
    /// Largest phase contribution `|k_i| * halfband^i` of each random
    /// coefficient, in radians. The polynomial variable is the offset from
    /// the band centre.
    pub xuv_phase_edges: [f64; 6],
    pub ir_phase_edges: [f64; 6],
}

impl Default for StreakingConfig {
    fn default() -> Self {
        StreakingConfig {
            energy_min_ev: 50.0,
            energy_max_ev: 305.0,
            n_energy: 256,
            delay_min_fs: -8.0,
            delay_max_fs: 8.0,
            n_delay: 35,
            n_xuv: 200,
            n_ir: 20,
            ionization_potential_ev: 21.55,
            dipole: 1.0,
            ir_center_ev: 1.5498,
            ir_span_ev: 0.2,
            ir_fwhm_ev: 0.05,
            xuv_fwhm_ev: 127.5,
            xuv_amp_spectrum: None,
            ir_amp_spectrum: None,
            steps_per_delay: 48,
            time_margin_fs: 2.0,
            ir_field_scale: 14.0,
            vector_potential: VectorPotentialMode::Integral,
            xuv_phase_edges: [std::f64::consts::PI, 30.0, 15.0, 8.0, 4.0, 2.0],
            ir_phase_edges: [std::f64::consts::PI, 1.0, 0.5, 0.25, 0.1, 0.05],
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn gaussian_power(grid: &[f64], center: f64, fwhm: f64) -> Vec<f64> {
    let c = 4.0 * std::f64::consts::LN_2 / (fwhm * fwhm);
    grid.iter().map(|w| (-c * (w - center).powi(2)).exp()).collect()
}

impl StreakingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if 2 * self.n_xuv + 2 * self.n_ir != 440 {
            return bad(format!(
                "n_xuv*2 + n_ir*2 must be 440, got {}",
                2 * self.n_xuv + 2 * self.n_ir
            ));
        }
        if self.n_energy < 1 || self.n_delay < 2 || self.n_xuv < 2 || self.n_ir < 2 {
            return bad("grids need n_energy >= 1 and at least 2 delays and spectral samples".into());
        }
        let reals = [
            self.energy_min_ev,
            self.energy_max_ev,
            self.delay_min_fs,
            self.delay_max_fs,
            self.ionization_potential_ev,
            self.dipole,
            self.ir_center_ev,
            self.ir_span_ev,
            self.ir_fwhm_ev,
            self.xuv_fwhm_ev,
            self.time_margin_fs,
            self.ir_field_scale,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad("streaking config has a non-finite value".into());
        }
        if self.energy_min_ev <= 0.0 {
            return Err(Error::Domain(format!(
                "kinetic energies must be positive, got {}",
                self.energy_min_ev
            )));
        }
        if self.n_energy > 1 && self.energy_max_ev <= self.energy_min_ev {
            return bad("energy grid must be strictly increasing".into());
        }
        if self.delay_max_fs <= self.delay_min_fs {
            return bad("delay grid must be strictly increasing".into());
        }
        if self.ir_span_ev <= 0.0 || self.ir_center_ev - self.ir_span_ev / 2.0 <= 0.0 {
            return bad("IR band must be positive and strictly increasing".into());
        }
        if self.ir_fwhm_ev <= 0.0 || self.xuv_fwhm_ev <= 0.0 || self.steps_per_delay == 0 {
            return bad("widths and steps_per_delay must be positive".into());
        }
        for (name, amp, n) in [
            ("xuv", &self.xuv_amp_spectrum, self.n_xuv),
            ("ir", &self.ir_amp_spectrum, self.n_ir),
        ] {
            if let Some(a) = amp {
                if a.len() != n {
                    return bad(format!("{name} spectrum needs {n} values, got {}", a.len()));
                }
                if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Domain(format!("{name} spectrum must be non-negative")));
                }
            }
        }
        let lattice = TimeLattice::new(self);
        if lattice.margin_steps < lattice.xuv_half_steps {
            return bad(format!(
                "time margin of {} steps is shorter than the XUV window half-width of {} steps",
                lattice.margin_steps, lattice.xuv_half_steps
            ));
        }
        Ok(())
    }

    /// Kinetic energies `K` in atomic units.
    pub fn energies_au(&self) -> Vec<f64> {
        linspace(self.energy_min_ev, self.energy_max_ev, self.n_energy)
            .into_iter()
            .map(ev_to_au)
            .collect()
    }

    pub fn delays_au(&self) -> Vec<f64> {
        linspace(self.delay_min_fs, self.delay_max_fs, self.n_delay)
            .into_iter()
            .map(fs_to_au)
            .collect()
    }

    /// XUV photon energies in eV, `(energy_min + I_p)` to `(energy_max + I_p)`.
    pub fn xuv_photon_ev(&self) -> Vec<f64> {
        let ip = self.ionization_potential_ev;
        linspace(self.energy_min_ev + ip, self.energy_max_ev + ip, self.n_xuv)
    }

    pub fn xuv_grid_au(&self) -> Vec<f64> {
        self.xuv_photon_ev().into_iter().map(ev_to_au).collect()
    }

    pub fn ir_grid_au(&self) -> Vec<f64> {
        let half = self.ir_span_ev / 2.0;
        linspace(self.ir_center_ev - half, self.ir_center_ev + half, self.n_ir)
            .into_iter()
            .map(ev_to_au)
            .collect()
    }

    pub fn xuv_center_au(&self) -> f64 {
        let g = self.xuv_grid_au();
        0.5 * (g[0] + g[g.len() - 1])
    }

    pub fn ir_center_au(&self) -> f64 {
        ev_to_au(self.ir_center_ev)
    }

    pub fn xuv_power(&self) -> Vec<f64> {
        match &self.xuv_amp_spectrum {
            Some(a) => a.clone(),
            None => {
                let ev = self.xuv_photon_ev();
                let c = 0.5 * (ev[0] + ev[ev.len() - 1]);
                gaussian_power(&ev, c, self.xuv_fwhm_ev)
            }
        }
    }

    pub fn ir_power(&self) -> Vec<f64> {
        match &self.ir_amp_spectrum {
            Some(a) => a.clone(),
            None => {
                let half = self.ir_span_ev / 2.0;
                let ev = linspace(self.ir_center_ev - half, self.ir_center_ev + half, self.n_ir);
                gaussian_power(&ev, self.ir_center_ev, self.ir_fwhm_ev)
            }
        }
    }

    pub fn signal_len(&self) -> usize {
        2 * self.n_xuv + 2 * self.n_ir
    }

    /// Integration time lattice in atomic units.
    pub fn time_grid_au(&self) -> Vec<f64> {
        let l = TimeLattice::new(self);
        (0..l.n_t).map(|n| l.t0 + l.dt * n as f64).collect()
    }

    pub fn dt_au(&self) -> f64 {
        TimeLattice::new(self).dt
    }

    /// Period of the XUV Fourier sum, `2 pi / d_omega`.
    pub fn xuv_period_au(&self) -> f64 {
        let g = self.xuv_grid_au();
        2.0 * std::f64::consts::PI / (g[1] - g[0])
    }
}

#[derive(Debug, Clone, Copy)]
struct TimeLattice {
    dt: f64,
    t0: f64,
    n_t: usize,
    margin_steps: usize,
    xuv_half_steps: usize,
}

impl TimeLattice {
    fn new(cfg: &StreakingConfig) -> Self {
        let d0 = fs_to_au(cfg.delay_min_fs);
        let d1 = fs_to_au(cfg.delay_max_fs);
        let step = (d1 - d0) / (cfg.n_delay - 1) as f64;
        let dt = step / cfg.steps_per_delay as f64;
        let margin_steps = (fs_to_au(cfg.time_margin_fs) / dt).ceil() as usize;
        let n_t = 2 * margin_steps + (cfg.n_delay - 1) * cfg.steps_per_delay + 1;
        let period = cfg.xuv_period_au();
        let xuv_half_steps = (0.5 * period / dt).floor() as usize;
        TimeLattice {
            dt,
            t0: d0 - margin_steps as f64 * dt,
            n_t,
            margin_steps,
            xuv_half_steps,
        }
    }
}

/// Window applied to the XUV time field: 1 for `|s| <= P/4`, a cos^2 taper
/// to 0 at `|s| = P/2`, and 0 beyond, where `P` is the Fourier-sum period.
pub fn xuv_window(s: f64, period: f64) -> f64 {
    let q = period / 4.0;
    let a = s.abs();
    if a <= q {
        1.0
    } else if a >= 2.0 * q {
        0.0
    } else {
        let c = (std::f64::consts::FRAC_PI_2 * (a - q) / q).cos();
        c * c
    }
}

/// Spectral phase polynomial `phi(w) = sum_i k_i (w - center)^i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulsePhase {
    pub k: [f64; 6],
}

impl PulsePhase {
    pub fn zero() -> Self {
        PulsePhase { k: [0.0; 6] }
    }

    pub fn eval(&self, w: f64, center: f64) -> f64 {
        let x = w - center;
        self.k.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    /// Draws `k_i` uniformly from `+-edges[i] / halfband^i`.
    pub fn random(rng: &mut SplitMix64, edges: &[f64; 6], halfband: f64) -> Self {
        let mut k = [0.0; 6];
        for (i, ki) in k.iter_mut().enumerate() {
            let lim = edges[i] / halfband.powi(i as i32);
            *ki = rng.uniform(-lim, lim);
        }
        PulsePhase { k }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn get(&self, j: usize) -> Complex64 {
        Complex64::new(self.re[j], self.im[j])
    }
}

/// `E(w) = sqrt(S(w)) exp(i phi(w))` sampled on `grid`.
pub fn build_spectrum(
    power: &[f64],
    phase: &PulsePhase,
    grid: &[f64],
    center: f64,
) -> Result<ComplexSpectrum> {
    if power.len() != grid.len() {
        return Err(Error::Shape(format!(
            "spectrum has {} samples but grid has {}",
            power.len(),
            grid.len()
        )));
    }
    if let Some(j) = power.iter().position(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!(
            "negative or non-finite spectral power {} at sample {j}",
            power[j]
        )));
    }
    let mut re = Vec::with_capacity(grid.len());
    let mut im = Vec::with_capacity(grid.len());
    for (p, w) in power.iter().zip(grid) {
        let amp = p.sqrt();
        let (s, c) = phase.eval(*w, center).sin_cos();
        re.push(amp * c);
        im.push(amp * s);
    }
    Ok(ComplexSpectrum { re, im })
}

/// `A(t) = -int_t^{t_end} E(t') dt'` by the trapezoid rule.
pub fn vector_potential(e_ir: &[f64], dt: f64) -> Vec<f64> {
    cumint_to_end(e_ir, dt).into_iter().map(|v| -v).collect()
}

/// `phi_G(K, t) = -int_t^{t_end} [v A + A^2/2] dt'` with `v = sqrt(2K)`.
pub fn phase_gate(a: &[f64], dt: f64, k_au: f64) -> Result<Vec<f64>> {
    if !(k_au > 0.0) {
        return Err(Error::Domain(format!(
            "kinetic energy must be positive, got {k_au}"
        )));
    }
    let v = (2.0 * k_au).sqrt();
    let b = cumint_to_end(a, dt);
    let a2: Vec<f64> = a.iter().map(|x| x * x).collect();
    let c = cumint_to_end(&a2, dt);
    Ok(b.iter().zip(&c).map(|(b, c)| -v * b - 0.5 * c).collect())
}

/// Constant tables shared by every evaluation of one configuration.
struct Tables {
    cfg: StreakingConfig,
    dt: f64,
    n_t: usize,
    n_k: usize,
    half: usize,
    delay_index: Vec<usize>,
    v: Vec<f64>,
    /// `d * exp(-i (K + I_p) t_n)`, row per energy.
    carrier_re: Vec<f64>,
    carrier_im: Vec<f64>,
    /// `(d_omega / 2 pi) win(s_m) exp(i w_j s_m)`, row per `m`.
    xuv_basis: Vec<Complex64>,
    /// IR basis: the field (integral mode) or `A` directly (derivative mode).
    ir_basis: Vec<Complex64>,
}

/// Streaking forward model with precomputed carrier tables.
#[derive(Clone)]
pub struct StreakingModel {
    t: Arc<Tables>,
}

impl std::fmt::Debug for StreakingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreakingModel")
            .field("n_energy", &self.t.n_k)
            .field("n_delay", &self.t.delay_index.len())
            .field("n_t", &self.t.n_t)
            .finish()
    }
}

impl StreakingModel {
    pub fn new(cfg: StreakingConfig) -> Result<Self> {
        cfg.validate()?;
        let lat = TimeLattice::new(&cfg);
        let dt = lat.dt;
        let n_t = lat.n_t;
        let times: Vec<f64> = (0..n_t).map(|n| lat.t0 + dt * n as f64).collect();
        let energies = cfg.energies_au();
        let ip = ev_to_au(cfg.ionization_potential_ev);
        let n_k = energies.len();

        let mut carrier_re = vec![0.0; n_k * n_t];
        let mut carrier_im = vec![0.0; n_k * n_t];
        for (ki, k) in energies.iter().enumerate() {
            let w = k + ip;
            for (n, t) in times.iter().enumerate() {
                let (s, c) = (-w * t).sin_cos();
                carrier_re[ki * n_t + n] = cfg.dipole * c;
                carrier_im[ki * n_t + n] = cfg.dipole * s;
            }
        }

        let xg = cfg.xuv_grid_au();
        let dw = xg[1] - xg[0];
        let period = 2.0 * std::f64::consts::PI / dw;
        let half = lat.xuv_half_steps;
        let mut xuv_basis = Vec::with_capacity((2 * half + 1) * xg.len());
        for m in 0..2 * half + 1 {
            let s = (m as f64 - half as f64) * dt;
            let w = dw / (2.0 * std::f64::consts::PI) * xuv_window(s, period);
            for wj in &xg {
                xuv_basis.push(Complex64::from_polar(w, wj * s));
            }
        }

        let ig = cfg.ir_grid_au();
        let dom = ig[1] - ig[0];
        let pref = cfg.ir_field_scale * dom / (2.0 * std::f64::consts::PI);
        let mut ir_basis = Vec::with_capacity(n_t * ig.len());
        for t in &times {
            for oj in &ig {
                let e = Complex64::from_polar(pref, oj * t);
                ir_basis.push(match cfg.vector_potential {
                    VectorPotentialMode::Integral => e,
                    VectorPotentialMode::Derivative => e * Complex64::new(0.0, -oj),
                });
            }
        }

        let delay_index = (0..cfg.n_delay)
            .map(|k| lat.margin_steps + k * cfg.steps_per_delay)
            .collect();
        let v = energies.iter().map(|k| (2.0 * k).sqrt()).collect();

        Ok(StreakingModel {
            t: Arc::new(Tables {
                cfg,
                dt,
                n_t,
                n_k,
                half,
                delay_index,
                v,
                carrier_re,
                carrier_im,
                xuv_basis,
                ir_basis,
            }),
        })
    }

    pub fn config(&self) -> &StreakingConfig {
        &self.t.cfg
    }

    /// The same model with its delay columns reordered: column `j` of the
    /// new model is column `perm[j]` of this one.
    pub fn with_delay_permutation(&self, perm: &[usize]) -> Result<Self> {
        let n = self.t.delay_index.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("not a permutation of {n} delays")));
        }
        let t = &self.t;
        Ok(StreakingModel {
            t: Arc::new(Tables {
                cfg: t.cfg.clone(),
                dt: t.dt,
                n_t: t.n_t,
                n_k: t.n_k,
                half: t.half,
                delay_index: perm.iter().map(|&p| t.delay_index[p]).collect(),
                v: t.v.clone(),
                carrier_re: t.carrier_re.clone(),
                carrier_im: t.carrier_im.clone(),
                xuv_basis: t.xuv_basis.clone(),
                ir_basis: t.ir_basis.clone(),
            }),
        })
    }

    /// Packs XUV and IR spectra into the 440-long signal layout.
    pub fn pack(&self, xuv: &ComplexSpectrum, ir: &ComplexSpectrum) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.t.cfg.signal_len());
        f.extend_from_slice(&xuv.re);
        f.extend_from_slice(&xuv.im);
        f.extend_from_slice(&ir.re);
        f.extend_from_slice(&ir.im);
        f
    }

    /// Signal built from the configured amplitude spectra and two phases.
    pub fn signal_from_phases(&self, xuv: &PulsePhase, ir: &PulsePhase) -> Result<Vec<f64>> {
        let cfg = &self.t.cfg;
        let x = build_spectrum(&cfg.xuv_power(), xuv, &cfg.xuv_grid_au(), cfg.xuv_center_au())?;
        let r = build_spectrum(&cfg.ir_power(), ir, &cfg.ir_grid_au(), cfg.ir_center_au())?;
        Ok(self.pack(&x, &r))
    }

    pub fn random_phases(&self, rng: &mut SplitMix64) -> (PulsePhase, PulsePhase) {
        let cfg = &self.t.cfg;
        let xg = cfg.xuv_grid_au();
        let ig = cfg.ir_grid_au();
        let xh = 0.5 * (xg[xg.len() - 1] - xg[0]);
        let ih = 0.5 * (ig[ig.len() - 1] - ig[0]);
        let xuv = PulsePhase::random(rng, &cfg.xuv_phase_edges, xh);
        let ir = PulsePhase::random(rng, &cfg.ir_phase_edges, ih);
        (xuv, ir)
    }

    /// Vector potential on the integration lattice for a packed signal.
    pub fn vector_potential_of(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(f.len())?;
        Ok(self.potential(f))
    }

    /// Writes every grid (energies, delays, time lattice, spectral grids) as
    /// tensor files into `dir`.
    pub fn export_grids(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = &self.t.cfg;
        let grids = [
            ("energies_au", cfg.energies_au()),
            ("delays_au", cfg.delays_au()),
            ("time_au", cfg.time_grid_au()),
            ("xuv_grid_au", cfg.xuv_grid_au()),
            ("ir_grid_au", cfg.ir_grid_au()),
        ];
        for (name, g) in grids {
            tensor_file::write_f64(dir.join(format!("{name}.tns")), &[g.len()], &g)?;
        }
        Ok(())
    }

    fn n_xuv(&self) -> usize {
        self.t.cfg.n_xuv
    }

    fn n_ir(&self) -> usize {
        self.t.cfg.n_ir
    }

    fn xuv_field(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nx = self.n_xuv();
        let (re, rest) = f.split_at(nx);
        let im = &rest[..nx];
        let rows = 2 * self.t.half + 1;
        let mut er = vec![0.0; rows];
        let mut ei = vec![0.0; rows];
        for m in 0..rows {
            let row = &self.t.xuv_basis[m * nx..(m + 1) * nx];
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..nx {
                acc += row[j] * Complex64::new(re[j], im[j]);
            }
            er[m] = acc.re;
            ei[m] = acc.im;
        }
        (er, ei)
    }

    fn potential(&self, f: &[f64]) -> Vec<f64> {
        let nx = self.n_xuv();
        let ni = self.n_ir();
        let rr = &f[2 * nx..2 * nx + ni];
        let ri = &f[2 * nx + ni..2 * nx + 2 * ni];
        let mut field = vec![0.0; self.t.n_t];
        for (n, out) in field.iter_mut().enumerate() {
            let row = &self.t.ir_basis[n * ni..(n + 1) * ni];
            let mut acc = 0.0;
            for j in 0..ni {
                acc += row[j].re * rr[j] - row[j].im * ri[j];
            }
            *out = acc;
        }
        match self.t.cfg.vector_potential {
            VectorPotentialMode::Integral => vector_potential(&field, self.t.dt),
            VectorPotentialMode::Derivative => field,
        }
    }

    fn run(&self, f: &[f64], keep: bool) -> Forward {
        let t = &*self.t;
        let (er, ei) = self.xuv_field(f);
        let a_pot = self.potential(f);
        let b = cumint_to_end(&a_pot, t.dt);
        let a2: Vec<f64> = a_pot.iter().map(|x| x * x).collect();
        let c = cumint_to_end(&a2, t.dt);
        let n_d = t.delay_index.len();
        let rows = 2 * t.half + 1;

        let mut amp_re = vec![0.0; t.n_k * n_d];
        let mut amp_im = vec![0.0; t.n_k * n_d];
        let mut g_keep_re = if keep { vec![0.0; t.n_k * t.n_t] } else { Vec::new() };
        let mut g_keep_im = if keep { vec![0.0; t.n_k * t.n_t] } else { Vec::new() };
        let mut gr = vec![0.0; t.n_t];
        let mut gi = vec![0.0; t.n_t];
        for k in 0..t.n_k {
            gate_row(
                &t.carrier_re[k * t.n_t..(k + 1) * t.n_t],
                &t.carrier_im[k * t.n_t..(k + 1) * t.n_t],
                &b,
                &c,
                t.v[k],
                &mut gr,
                &mut gi,
            );
            for (d, &nk) in t.delay_index.iter().enumerate() {
                let base = nk - t.half;
                let (sr, si) = cdot(&er, &ei, &gr[base..base + rows], &gi[base..base + rows]);
                amp_re[k * n_d + d] = t.dt * sr;
                amp_im[k * n_d + d] = t.dt * si;
            }
            if keep {
                g_keep_re[k * t.n_t..(k + 1) * t.n_t].copy_from_slice(&gr);
                g_keep_im[k * t.n_t..(k + 1) * t.n_t].copy_from_slice(&gi);
            }
        }
        let trace = amp_re
            .iter()
            .zip(&amp_im)
            .map(|(r, i)| r * r + i * i)
            .collect();
        Forward {
            trace,
            amp_re,
            amp_im,
            er,
            ei,
            a_pot,
            g_re: g_keep_re,
            g_im: g_keep_im,
        }
    }
}

/// `G[n] = carrier[n] * exp(i (-v B_n - C_n / 2))`.
fn gate_row(
    cr: &[f64],
    ci: &[f64],
    b: &[f64],
    c: &[f64],
    v: f64,
    gr: &mut [f64],
    gi: &mut [f64],
) {
    for n in 0..gr.len() {
        let (s, co) = sin_cos(-v * b[n] - 0.5 * c[n]);
        gr[n] = cr[n] * co - ci[n] * s;
        gi[n] = cr[n] * s + ci[n] * co;
    }
}

/// Unconjugated complex dot product of split arrays, four lanes wide.
fn cdot(ar: &[f64], ai: &[f64], br: &[f64], bi: &[f64]) -> (f64, f64) {
    let n = ar.len();
    let mut re = [0.0; 4];
    let mut im = [0.0; 4];
    let chunks = n / 4;
    for q in 0..chunks {
        for l in 0..4 {
            let i = 4 * q + l;
            re[l] += ar[i] * br[i] - ai[i] * bi[i];
            im[l] += ar[i] * bi[i] + ai[i] * br[i];
        }
    }
    let mut sr = (re[0] + re[1]) + (re[2] + re[3]);
    let mut si = (im[0] + im[1]) + (im[2] + im[3]);
    for i in 4 * chunks..n {
        sr += ar[i] * br[i] - ai[i] * bi[i];
        si += ar[i] * bi[i] + ai[i] * br[i];
    }
    (sr, si)
}

struct Forward {
    trace: Vec<f64>,
    amp_re: Vec<f64>,
    amp_im: Vec<f64>,
    er: Vec<f64>,
    ei: Vec<f64>,
    a_pot: Vec<f64>,
    g_re: Vec<f64>,
    g_im: Vec<f64>,
}

struct StreakPullback {
    t: Arc<Tables>,
    fw: Forward,
}

impl Pullback for StreakPullback {
    fn pull(&self, grad_g: &[f64]) -> Vec<f64> {
        let t = &*self.t;
        let fw = &self.fw;
        let n_d = t.delay_index.len();
        let rows = 2 * t.half + 1;
        let nx = t.cfg.n_xuv;
        let ni = t.cfg.n_ir;

        let mut ex_bar_re = vec![0.0; rows];
        let mut ex_bar_im = vec![0.0; rows];
        let mut b_bar = vec![0.0; t.n_t];
        let mut c_bar = vec![0.0; t.n_t];
        let mut gb_re = vec![0.0; t.n_t];
        let mut gb_im = vec![0.0; t.n_t];
        for k in 0..t.n_k {
            let gr = &fw.g_re[k * t.n_t..(k + 1) * t.n_t];
            let gi = &fw.g_im[k * t.n_t..(k + 1) * t.n_t];
            gb_re.iter_mut().for_each(|x| *x = 0.0);
            gb_im.iter_mut().for_each(|x| *x = 0.0);
            for (d, &nk) in t.delay_index.iter().enumerate() {
                let idx = k * n_d + d;
                // cotangent of the complex amplitude, scaled by the quadrature weight
                let w = 2.0 * grad_g[idx] * t.dt;
                let (ar, ai) = (w * fw.amp_re[idx], w * fw.amp_im[idx]);
                if ar == 0.0 && ai == 0.0 {
                    continue;
                }
                let base = nk - t.half;
                let (grs, gis) = (&gr[base..base + rows], &gi[base..base + rows]);
                for m in 0..rows {
                    // E_x bar += conj(G) a_bar
                    ex_bar_re[m] += grs[m] * ar + gis[m] * ai;
                    ex_bar_im[m] += grs[m] * ai - gis[m] * ar;
                }
                let (gbr, gbi) = (&mut gb_re[base..base + rows], &mut gb_im[base..base + rows]);
                for m in 0..rows {
                    // G bar += conj(E_x) a_bar
                    gbr[m] += fw.er[m] * ar + fw.ei[m] * ai;
                    gbi[m] += fw.er[m] * ai - fw.ei[m] * ar;
                }
            }
            let v = t.v[k];
            for n in 0..t.n_t {
                let psi_bar = -(gi[n] * gb_re[n] - gr[n] * gb_im[n]);
                b_bar[n] -= v * psi_bar;
                c_bar[n] -= 0.5 * psi_bar;
            }
        }

        let mut a_bar = cumint_to_end_adjoint(&b_bar, t.dt);
        let c_adj = cumint_to_end_adjoint(&c_bar, t.dt);
        for n in 0..t.n_t {
            a_bar[n] += 2.0 * fw.a_pot[n] * c_adj[n];
        }
        let field_bar = match t.cfg.vector_potential {
            VectorPotentialMode::Integral => cumint_to_end_adjoint(&a_bar, t.dt)
                .into_iter()
                .map(|x| -x)
                .collect(),
            VectorPotentialMode::Derivative => a_bar,
        };

        let mut out = vec![0.0; 2 * nx + 2 * ni];
        for m in 0..rows {
            let row = &t.xuv_basis[m * nx..(m + 1) * nx];
            let e = Complex64::new(ex_bar_re[m], ex_bar_im[m]);
            for j in 0..nx {
                let x = row[j].conj() * e;
                out[j] += x.re;
                out[nx + j] += x.im;
            }
        }
        for n in 0..t.n_t {
            let row = &t.ir_basis[n * ni..(n + 1) * ni];
            let e = field_bar[n];
            for j in 0..ni {
                out[2 * nx + j] += e * row[j].re;
                out[2 * nx + ni + j] -= e * row[j].im;
            }
        }
        out
    }
}

impl ForwardModel for StreakingModel {
    fn system(&self) -> SystemId {
        SystemId::Streaking
    }

    fn signal_shape(&self) -> Vec<usize> {
        vec![self.t.cfg.signal_len()]
    }

    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.t.n_k, self.t.delay_index.len()]
    }

    fn is_linear(&self) -> bool {
        false
    }

    fn nonneg_measurement(&self) -> bool {
        true
    }

    fn apply_flat(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(f.len())?;
        Ok(self.run(f, false).trace)
    }

    fn linearize(&self, f: &[f64]) -> Result<(Vec<f64>, Box<dyn Pullback>)> {
        self.check_signal_len(f.len())?;
        let fw = self.run(f, true);
        let g = fw.trace.clone();
        Ok((
            g,
            Box::new(StreakPullback {
                t: self.t.clone(),
                fw,
            }),
        ))
    }
}

fn unwrap_phases(p: &mut [f64]) {
    use std::f64::consts::PI;
    for i in 1..p.len() {
        let mut d = p[i] - p[i - 1];
        while d > PI {
            d -= 2.0 * PI;
        }
        while d < -PI {
            d += 2.0 * PI;
        }
        p[i] = p[i - 1] + d;
    }
}

pub const CEP_WINDOW_EV: (f64, f64) = (100.0, 300.0);
pub const CEP_AMPLITUDE_FLOOR: f64 = 1e-8;

/// Aligns the constant XUV phase of `candidate` to `reference`.
///
/// The shift is the mean unwrapped phase difference `arg E_ref - arg E_cand`
/// over photon energies in [`CEP_WINDOW_EV`], counting only samples where both
/// amplitudes exceed [`CEP_AMPLITUDE_FLOOR`]. The aligned signal is the
/// candidate with its XUV spectrum multiplied by `exp(i shift)`.
pub fn cep_align(
    candidate: &SignalVec,
    reference: &SignalVec,
    cfg: &StreakingConfig,
) -> Result<(SignalVec, f64)> {
    for s in [candidate, reference] {
        if s.system() != SystemId::Streaking {
            return Err(Error::SystemMismatch {
                expected: SystemId::Streaking,
                found: s.system(),
            });
        }
        if s.flat_len() != cfg.signal_len() {
            return Err(Error::Shape(format!(
                "streaking signal needs {} values, got {}",
                cfg.signal_len(),
                s.flat_len()
            )));
        }
    }
    let nx = cfg.n_xuv;
    let c = candidate.as_flat();
    let r = reference.as_flat();
    let mut diffs = Vec::new();
    for (j, ev) in cfg.xuv_photon_ev().iter().enumerate() {
        if *ev < CEP_WINDOW_EV.0 || *ev > CEP_WINDOW_EV.1 {
            continue;
        }
        let zc = Complex64::new(c[j], c[nx + j]);
        let zr = Complex64::new(r[j], r[nx + j]);
        if zc.norm() <= CEP_AMPLITUDE_FLOOR || zr.norm() <= CEP_AMPLITUDE_FLOOR {
            continue;
        }
        diffs.push((zr * zc.conj()).arg());
    }
    if diffs.is_empty() {
        return Err(Error::AlignmentUndefined(format!(
            "no XUV amplitude above {CEP_AMPLITUDE_FLOOR} within {}-{} eV",
            CEP_WINDOW_EV.0, CEP_WINDOW_EV.1
        )));
    }
    unwrap_phases(&mut diffs);
    let shift = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let rot = Complex64::from_polar(1.0, shift);
    let mut out = c.to_vec();
    for j in 0..nx {
        let z = Complex64::new(c[j], c[nx + j]) * rot;
        out[j] = z.re;
        out[nx + j] = z.im;
    }
    Ok((SignalVec::new(SystemId::Streaking, vec![c.len()], out)?, shift))
}

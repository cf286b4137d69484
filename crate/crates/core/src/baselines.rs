//! Iterative TV-regularized MAP reconstruction and the point-estimate
//! network wrappers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Method, Model};
use crate::rng::SplitMix64;
use crate::types::{ForwardModel, SignalVec, SystemId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    pub lambda_tv: f64,
    pub max_iters: usize,
    /// Gradient step; `None` uses `1 / (2 ||A||^2)`.
    pub step_size: Option<f64>,
    /// Stop once the relative objective decrease falls below this.
    pub stop_tol: f64,
    pub inner_iters: usize,
    pub power_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            lambda_tv: 100.0,
            max_iters: 300,
            step_size: None,
            stop_tol: 1e-7,
            inner_iters: 10,
            power_iters: 50,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tv >= 0.0) || self.max_iters == 0 || self.inner_iters == 0 || self.power_iters == 0 {
            return Err(Error::Config(
                "lambda_tv must be non-negative and iteration counts positive".into(),
            ));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config("step_size must be positive".into()));
            }
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("stop_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvHistoryRow {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvSolution {
    pub f: SignalVec,
    /// Row 0 is the zero initial iterate.
    pub history: Vec<TvHistoryRow>,
    pub step: f64,
}

impl TvSolution {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,objective,residual,tv\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", r.iteration, r.objective, r.residual, r.tv));
        }
        s
    }
}

/// Image planes of a signal laid out as `[ny, nx, rest...]`.
#[derive(Debug, Clone, Copy)]
struct Planes {
    ny: usize,
    nx: usize,
    p: usize,
}

impl Planes {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::Unsupported("TV needs a signal with two spatial axes".into()));
        }
        Ok(Planes {
            ny: shape[0],
            nx: shape[1],
            p: shape[2..].iter().product(),
        })
    }

    fn idx(&self, y: usize, x: usize, q: usize) -> usize {
        (y * self.nx + x) * self.p + q
    }

    fn len(&self) -> usize {
        self.ny * self.nx * self.p
    }

    /// Forward differences `(dy, dx)`, zero across the far boundary.
    fn grad(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dy = vec![0.0; self.len()];
        let mut dx = vec![0.0; self.len()];
        for y in 0..self.ny {
            for x in 0..self.nx {
                for q in 0..self.p {
                    let i = self.idx(y, x, q);
                    if y + 1 < self.ny {
                        dy[i] = u[self.idx(y + 1, x, q)] - u[i];
                    }
                    if x + 1 < self.nx {
                        dx[i] = u[self.idx(y, x + 1, q)] - u[i];
                    }
                }
            }
        }
        (dy, dx)
    }

    /// Transpose of [`Planes::grad`].
    fn grad_t(&self, py: &[f64], px: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for y in 0..self.ny {
            for x in 0..self.nx {
                for q in 0..self.p {
                    let i = self.idx(y, x, q);
                    if y + 1 < self.ny {
                        out[self.idx(y + 1, x, q)] += py[i];
                        out[i] -= py[i];
                    }
                    if x + 1 < self.nx {
                        out[self.idx(y, x + 1, q)] += px[i];
                        out[i] -= px[i];
                    }
                }
            }
        }
        out
    }

    fn tv(&self, u: &[f64]) -> f64 {
        let (dy, dx) = self.grad(u);
        dy.iter().chain(&dx).map(|v| v.abs()).sum()
    }
}

/// Anisotropic TV of a signal with layout `[ny, nx, rest...]`, summed over
/// the trailing planes.
pub fn total_variation(f: &[f64], shape: &[usize]) -> Result<f64> {
    let pl = Planes::of(shape)?;
    if f.len() != pl.len() {
        return Err(Error::Shape(format!("TV of {} values with shape {shape:?}", f.len())));
    }
    Ok(pl.tv(f))
}

/// Largest eigenvalue of `A^T A` by power iteration.
pub fn operator_norm_sq(fm: &dyn ForwardModel, iters: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut x = rng.normals(fm.signal_len());
    let mut lam = 0.0;
    for _ in 0..iters {
        let n = crate::numeric::norm(&x);
        if n == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= n);
        let y = fm.adjoint_flat(&fm.apply_flat(&x)?)?;
        lam = crate::numeric::dot(&x, &y);
        x = y;
    }
    Ok(lam)
}

struct Problem<'a> {
    fm: &'a dyn ForwardModel,
    g: &'a [f64],
    planes: Planes,
    lambda: f64,
}

impl Problem<'_> {
    fn eval(&self, f: &[f64]) -> Result<TvHistoryRow> {
        let a = self.fm.apply_flat(f)?;
        let r2: f64 = a.iter().zip(self.g).map(|(a, g)| (g - a) * (g - a)).sum();
        let tv = self.planes.tv(f);
        Ok(TvHistoryRow {
            iteration: 0,
            objective: r2 + self.lambda * tv,
            residual: r2.sqrt(),
            tv,
        })
    }

    /// Approximate `prox_{theta TV}(v)` by accelerated projected gradient on
    /// the dual (Beck-Teboulle), warm-started from `(py, px)`.
    fn prox(&self, v: &[f64], theta: f64, py: &mut [f64], px: &mut [f64], iters: usize) -> Vec<f64> {
        if theta == 0.0 {
            return v.to_vec();
        }
        let pl = &self.planes;
        let sigma = 1.0 / (8.0 * theta);
        let (mut ry, mut rx) = (py.to_vec(), px.to_vec());
        let mut tk = 1.0f64;
        for _ in 0..iters {
            let dt = pl.grad_t(&ry, &rx);
            let u: Vec<f64> = v.iter().zip(&dt).map(|(v, d)| v - theta * d).collect();
            let (gy, gx) = pl.grad(&u);
            let tn = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
            let mom = (tk - 1.0) / tn;
            for i in 0..py.len() {
                let ny = (ry[i] + sigma * gy[i]).clamp(-1.0, 1.0);
                let nx = (rx[i] + sigma * gx[i]).clamp(-1.0, 1.0);
                ry[i] = ny + mom * (ny - py[i]);
                rx[i] = nx + mom * (nx - px[i]);
                py[i] = ny;
                px[i] = nx;
            }
            tk = tn;
        }
        let dt = pl.grad_t(py, px);
        v.iter().zip(&dt).map(|(v, d)| v - theta * d).collect()
    }
}

const PROX_ROUNDS: usize = 9;
const MAX_HALVINGS: usize = 10;

/// Proximal-gradient minimization of `||g - A f||^2 + lambda TV(f)` from
/// `f = 0`. Each accepted step does not increase the objective. A rejected
/// candidate is retried with the dual iteration count doubled (up to eight
/// times), then with half the step size; ten failed halvings end the solve.
pub fn tv_map_solve(g: &[f64], fm: &dyn ForwardModel, cfg: &TvConfig) -> Result<TvSolution> {
    cfg.validate()?;
    if !fm.is_linear() {
        return Err(Error::Unsupported(format!(
            "TV reconstruction needs a linear forward model, {} is not",
            fm.system()
        )));
    }
    fm.check_measurement_len(g.len())?;
    let planes = Planes::of(&fm.signal_shape())?;
    let prob = Problem {
        fm,
        g,
        planes,
        lambda: cfg.lambda_tv,
    };
    let step = match cfg.step_size {
        Some(s) => s,
        None => {
            let l = operator_norm_sq(fm, cfg.power_iters, 0)?;
            if l <= 0.0 {
                return Err(Error::Domain("forward operator is zero".into()));
            }
            1.0 / (2.0 * l)
        }
    };
    let n = fm.signal_len();
    let mut f = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut px = vec![0.0; n];
    let mut cur = prob.eval(&f)?;
    let mut history = vec![cur];
    'outer: for it in 1..=cfg.max_iters {
        let a = fm.apply_flat(&f)?;
        let r: Vec<f64> = a.iter().zip(g).map(|(a, g)| a - g).collect();
        let grad = fm.adjoint_flat(&r)?;
        let mut t = step;
        for _ in 0..=MAX_HALVINGS {
            let v: Vec<f64> = f.iter().zip(&grad).map(|(f, d)| f - 2.0 * t * d).collect();
            let (mut qy, mut qx) = (py.clone(), px.clone());
            // A rejected candidate usually means the inexact prox has not
            // converged yet, so refine the dual before shrinking the step.
            for round in 0..PROX_ROUNDS {
                let iters = cfg.inner_iters << round;
                let cand = prob.prox(&v, t * cfg.lambda_tv, &mut qy, &mut qx, iters);
                let mut row = prob.eval(&cand)?;
                if row.objective <= cur.objective {
                    row.iteration = it;
                    let rel = (cur.objective - row.objective) / cur.objective.abs().max(f64::MIN_POSITIVE);
                    f = cand;
                    (py, px) = (qy, qx);
                    cur = row;
                    history.push(row);
                    if rel < cfg.stop_tol {
                        break 'outer;
                    }
                    continue 'outer;
                }
                if cfg.lambda_tv == 0.0 {
                    break;
                }
            }
            t *= 0.5;
        }
        break;
    }
    let f = SignalVec::new(fm.system(), fm.signal_shape(), f)?;
    Ok(TvSolution { f, history, step })
}

/// Point estimate of a deterministic network.
pub fn deterministic_forward(model: &Model, g: &[f64]) -> Result<SignalVec> {
    if model.method() != Method::Deterministic {
        return Err(Error::Unsupported(format!("expected a deterministic model, got {}", model.method())));
    }
    model.deterministic_forward(g)
}

/// Point estimate of the physics-informed network (holograms only).
pub fn physics_informed_forward(model: &Model, g: &[f64]) -> Result<SignalVec> {
    if model.system() != SystemId::Hologram || model.method() != Method::PhysicsInformed {
        return Err(Error::Unsupported(format!(
            "expected a physics-informed hologram model, got {} for {}",
            model.method(),
            model.system()
        )));
    }
    model.deterministic_forward(g)
}

//! Layers built on [`crate::autodiff`] and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvShape, Graph, ParamId, ParamStore, Var};
use crate::rng::{tag, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers followed by ReLU.
    He,
    /// `N(0, 1 / fan_in)`.
    Lecun,
    Zero,
}

fn init_weights(seed: u64, name: &str, n: usize, fan_in: usize, init: Init) -> Vec<f64> {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Lecun => (1.0 / fan_in as f64).sqrt(),
        Init::Zero => return vec![0.0; n],
    };
    let mut rng = SplitMix64::derive(seed, &[tag("init"), tag(name)]);
    (0..n).map(|_| std * rng.normal()).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let wname = format!("{name}.w");
        let w = store.add(
            wname.clone(),
            vec![fan_out, fan_in],
            init_weights(seed, &wname, fan_in * fan_out, fan_in, init),
        );
        let b = store.add(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Var {
        g.linear(g.param(s, self.w), g.param(s, self.b), x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub shape: ConvShape,
}

impl Conv {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, shape: ConvShape, init: Init) -> Self {
        let wname = format!("{name}.w");
        let fan_in = shape.c_in * shape.k * shape.k;
        let w = store.add(
            wname.clone(),
            vec![shape.c_out, shape.c_in, shape.k, shape.k],
            init_weights(seed, &wname, shape.weight_len(), fan_in, init),
        );
        let b = store.add(format!("{name}.b"), vec![shape.c_out], vec![0.0; shape.c_out]);
        Conv { w, b, shape }
    }

    pub fn forward(&self, g: &Graph, s: &ParamStore, x: Var) -> Var {
        g.conv2d(x, g.param(s, self.w), g.param(s, self.b), self.shape)
    }

    pub fn out_len(&self) -> usize {
        self.shape.c_out * self.shape.out_h() * self.shape.out_w()
    }
}

/// Splits LSTM gate pre-activations `[i, f, g, o]` and advances the state.
pub fn lstm_update(g: &Graph, gates: Var, c_prev: Var, hidden: usize) -> (Var, Var) {
    let i = g.sigmoid(g.slice(gates, 0, hidden));
    let f = g.sigmoid(g.slice(gates, hidden, hidden));
    let cand = g.tanh(g.slice(gates, 2 * hidden, hidden));
    let o = g.sigmoid(g.slice(gates, 3 * hidden, hidden));
    let c = g.add(g.mul(f, c_prev), g.mul(i, cand));
    let h = g.mul(o, g.tanh(c));
    (h, c)
}

/// Sets the forget-gate slice of a gate bias to `value`.
pub fn set_forget_bias(store: &mut ParamStore, bias: ParamId, hidden: usize, per_gate: usize, value: f64) {
    let b = store.value_mut(bias);
    for v in &mut b[hidden * per_gate..2 * hidden * per_gate] {
        *v = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|p| vec![0.0; store.value(p).len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient keep their moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (p, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            let w = store.value_mut(p);
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = init_weights(3, "enc.w", 10_000, 50, Init::He);
        assert_eq!(a, init_weights(3, "enc.w", 10_000, 50, Init::He));
        assert_ne!(a, init_weights(3, "dec.w", 10_000, 50, Init::He));
        let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        assert!((var - 0.04).abs() < 0.004);
        assert!(init_weights(3, "z", 5, 5, Init::Zero).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", vec![3], vec![3.0, -2.0, 0.5]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..2000 {
            let g: Vec<f64> = store.value(p).iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.update(&mut store, &[Some(g)]);
        }
        for x in store.value(p) {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("x", vec![2], vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.update(&mut store, &[Some(vec![5.0, -0.1])]);
        let v = store.value(0);
        assert!((v[0] + 1e-3).abs() < 1e-9 && (v[1] - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }
}

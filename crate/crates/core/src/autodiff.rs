//! A small reverse-mode autodiff tape over flat `f64` vectors.
//!
//! One [`Graph`] is built per training sample. Parameters enter as leaves
//! that share storage with the [`ParamStore`], and [`Graph::backward`]
//! returns the gradient for every parameter the graph touched.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::Result;
use crate::types::ForwardModel;

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Arc<Vec<f64>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(!self.names.contains(&name), "duplicate param {name}");
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(Arc::new(data));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(data.len(), self.values[id].len(), "param {}", self.names[id]);
        self.values[id] = Arc::new(data);
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn shared(&self, id: ParamId) -> Arc<Vec<f64>> {
        self.values[id].clone()
    }
}

type Backward = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    value: Arc<Vec<f64>>,
    param: Option<ParamId>,
    backward: Option<Backward>,
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over a `(c_in, h, w)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let mut cols = vec![0.0; s.c_in * s.k * s.k * n];
    for c in 0..s.c_in {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = ((c * s.k + ky) * s.k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = (c * s.h + iy as usize) * s.w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            cols[row + oy * ow + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let n = oh * ow;
    let mut x = vec![0.0; s.c_in * s.h * s.w];
    for c in 0..s.c_in {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = ((c * s.k + ky) * s.k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = (c * s.h + iy as usize) * s.w;
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            x[dst + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit strides, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    // SAFETY: the callers size `a`, `b` and `c` to cover every index reached
    // by the given dimensions and strides, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-parameter gradients returned by [`Graph::backward`]; `None` for
/// parameters the graph never used.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Vec<f64>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            param: None,
            backward,
        });
        Var(nodes.len() - 1)
    }

    fn arc(&self, v: Var) -> Arc<Vec<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> Arc<Vec<f64>> {
        self.arc(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.arc(v);
        debug_assert_eq!(a.len(), 1);
        a[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, v: Vec<f64>) -> Var {
        self.push(v, None)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: store.shared(id),
            param: Some(id),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let xv = self.arc(x);
        let out: Vec<f64> = xv.iter().map(|&a| f(a)).collect();
        let ov = Arc::new(out.clone());
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = g
                    .iter()
                    .zip(xv.iter().zip(ov.iter()))
                    .map(|(g, (x, y))| g * df(*x, *y))
                    .collect();
                vec![(xi, d)]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.len(), bv.len(), "add length mismatch");
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g| vec![(ai, g.to_vec()), (bi, g.to_vec())])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.len(), bv.len(), "sub length mismatch");
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(ai, g.to_vec()), (bi, g.iter().map(|x| -x).collect())]
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.len(), bv.len(), "mul length mismatch");
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.iter().zip(bv.iter()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(av.iter()).map(|(g, x)| g * x).collect();
                vec![(ai, ga), (bi, gb)]
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.arc(a);
        let out = av.iter().map(|x| s * x).collect();
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g| vec![(ai, g.iter().map(|x| s * x).collect())])),
        )
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let av = self.arc(a);
        let out = av.iter().map(|x| x + s).collect();
        let ai = a.0;
        self.push(out, Some(Box::new(move |g| vec![(ai, g.to_vec())])))
    }

    /// `a * s[0]` for a one-element `s`.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.arc(a), self.arc(s));
        assert_eq!(sv.len(), 1);
        let out = av.iter().map(|x| x * sv[0]).collect();
        let (ai, si) = (a.0, s.0);
        self.push(
            out,
            Some(Box::new(move |g| {
                let ga = g.iter().map(|g| g * sv[0]).collect();
                let gs = g.iter().zip(av.iter()).map(|(g, x)| g * x).sum();
                vec![(ai, ga), (si, vec![gs])]
            })),
        )
    }

    /// `a + s[0]` for a one-element `s`.
    pub fn add_scalar_var(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.arc(a), self.arc(s));
        assert_eq!(sv.len(), 1);
        let out = av.iter().map(|x| x + sv[0]).collect();
        let (ai, si) = (a.0, s.0);
        self.push(
            out,
            Some(Box::new(move |g| vec![(ai, g.to_vec()), (si, vec![g.iter().sum()])])),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |a| 1.0 / (1.0 + (-a).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |a| a * a, |x, _| 2.0 * x)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |a| a.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.arc(x);
        let n = xv.len();
        let s = xv.iter().sum();
        let xi = x.0;
        self.push(vec![s], Some(Box::new(move |g| vec![(xi, vec![g[0]; n])])))
    }

    /// `sum(x^2)`.
    pub fn sum_sq(&self, x: Var) -> Var {
        let xv = self.arc(x);
        let s = xv.iter().map(|v| v * v).sum();
        let xi = x.0;
        self.push(
            vec![s],
            Some(Box::new(move |g| {
                vec![(xi, xv.iter().map(|v| 2.0 * g[0] * v).collect())]
            })),
        )
    }

    pub fn concat(&self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.arc(*p);
            spans.push((p.0, out.len(), v.len()));
            out.extend_from_slice(&v);
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                spans
                    .iter()
                    .map(|&(id, start, len)| (id, g[start..start + len].to_vec()))
                    .collect()
            })),
        )
    }

    pub fn slice(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.arc(x);
        assert!(start + len <= xv.len(), "slice out of range");
        let n = xv.len();
        let out = xv[start..start + len].to_vec();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut d = vec![0.0; n];
                d[start..start + len].copy_from_slice(g);
                vec![(xi, d)]
            })),
        )
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather(&self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.arc(x);
        let n = xv.len();
        let out = index.iter().map(|&i| xv[i]).collect();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut d = vec![0.0; n];
                for (gi, &i) in g.iter().zip(index.iter()) {
                    d[i] += gi;
                }
                vec![(xi, d)]
            })),
        )
    }

    /// `W x` with `W` stored row-major as `[rows, x.len()]`.
    pub fn matvec(&self, w: Var, x: Var) -> Var {
        let (wv, xv) = (self.arc(w), self.arc(x));
        let cols = xv.len();
        assert_eq!(wv.len() % cols, 0, "matvec shape mismatch");
        let rows = wv.len() / cols;
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                wv[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xv.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let (wi, xi) = (w.0, x.0);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gw = vec![0.0; rows * cols];
                let mut gx = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let wr = &wv[r * cols..(r + 1) * cols];
                    let gwr = &mut gw[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        gwr[c] = gr * xv[c];
                        gx[c] += gr * wr[c];
                    }
                }
                vec![(wi, gw), (xi, gx)]
            })),
        )
    }

    /// `W x + b`.
    pub fn linear(&self, w: Var, b: Var, x: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    /// 2-D convolution of a `(c_in, h, w)` input with weights
    /// `(c_out, c_in, k, k)` and a per-channel bias.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, s: ConvShape) -> Var {
        let (xv, wv, bv) = (self.arc(x), self.arc(w), self.arc(b));
        assert_eq!(xv.len(), s.c_in * s.h * s.w, "conv input shape");
        assert_eq!(wv.len(), s.weight_len(), "conv weight shape");
        assert_eq!(bv.len(), s.c_out, "conv bias shape");
        let n = s.out_h() * s.out_w();
        let kk = s.c_in * s.k * s.k;
        let cols = Arc::new(im2col(&xv, &s));
        let mut out = vec![0.0; s.c_out * n];
        gemm(s.c_out, kk, n, &wv, kk, 1, &cols, n, 1, &mut out);
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += bv[o]);
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut gw = vec![0.0; s.c_out * kk];
                // dW = G cols^T
                gemm(s.c_out, n, kk, g, n, 1, &cols, 1, n, &mut gw);
                let mut gcols = vec![0.0; kk * n];
                // dcols = W^T G
                gemm(kk, s.c_out, n, &wv, 1, kk, g, n, 1, &mut gcols);
                let gx = col2im(&gcols, &s);
                let gb = g.chunks(n).map(|r| r.iter().sum()).collect();
                vec![(xi, gx), (wi, gw), (bi, gb)]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of a `(c, h, w)` tensor.
    pub fn upsample2(&self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let xv = self.arc(x);
        assert_eq!(xv.len(), c * h * w, "upsample shape");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![(xi, d)]
            })),
        )
    }

    /// `A(x)` with gradients through the model's pullback.
    pub fn forward_model(&self, x: Var, fm: &dyn ForwardModel) -> Result<Var> {
        let xv = self.arc(x);
        let (g, pb) = fm.linearize(&xv)?;
        let xi = x.0;
        Ok(self.push(g, Some(Box::new(move |gout| vec![(xi, pb.pull(gout))]))))
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, n_params: usize) -> ParamGrads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out: ParamGrads = vec![None; n_params];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(p) = node.param {
                match &mut out[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            if let Some(bw) = &node.backward {
                for (parent, d) in bw(&g) {
                    debug_assert!(parent < i);
                    match &mut grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(d),
                    }
                }
            }
        }
        out
    }
}

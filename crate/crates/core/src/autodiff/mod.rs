//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! execution order, so the node index is already a topological order and
//! [`Graph::backward`] simply walks the tape from the loss down to zero.
//! Parameters live in a [`ParamStore`] and enter a graph as memoized leaves;
//! after backward their gradients are folded back with
//! [`Graph::accumulate_param_grads`]. A graph is single-use: build a fresh one
//! (or call [`Graph::reset`]) for every training step.

pub mod kernels;
pub mod params;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use params::{Buffer, BufferId, ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::stn;
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated by the owning layer.
    Batch,
    /// Running statistics.
    Running,
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: S },
    Act { x: usize, kind: Activation },
    Softplus(usize),
    LogClamped { x: usize, eps: S },
    Clamp { x: usize, lo: S, hi: S },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Narrow { x: usize, start: usize, width: usize },
    Linear { x: usize, w: usize, b: Option<usize>, n: usize, din: usize, dout: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cout: usize },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom, cin: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<S>, inv_std: Vec<S>, mode: NormMode, n: usize, c: usize, p: usize },
    AvgPool { x: usize, nc: usize, h: usize, w: usize, k: usize, s: usize },
    Blend { m: usize, f: usize, prev: usize },
    ConstrainPose { raw: usize, s_min: S },
    AffineGrid { theta: usize, h: usize, w: usize },
    GridSample { x: usize, grid: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<(u64, usize), usize>,
    frozen: HashSet<u64>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

/// Tape of one forward pass.
pub struct Graph<S: Scalar = f32> {
    id: u64,
    grad_enabled: bool,
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph that records values only; nothing requires grad.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                frozen: HashSet::new(),
                grads: Vec::new(),
                backward_done: false,
            }),
        }
    }

    /// Clears every node so the graph can record a new pass.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.params.clear();
        inner.grads.clear();
        inner.backward_done = false;
        self.id = NEXT_GRAPH.fetch_add(1, Ordering::Relaxed);
    }

    /// Parameters of `store` enter this graph as constants: gradients still
    /// flow through them to other inputs but are not computed for them.
    pub fn freeze(&self, store: &ParamStore<S>) {
        self.inner.borrow_mut().frozen.insert(store.uid());
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of distinct parameter leaves recorded so far.
    pub fn param_leaf_count(&self) -> usize {
        self.inner.borrow().params.len()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Graph("variable belongs to a different (or reset) graph".into()));
        }
        Ok(v.idx)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, parents: &[usize]) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| inner.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var { graph: self.id, idx: inner.nodes.len() - 1 }
    }

    /// A constant input.
    pub fn input(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: requires_grad && self.grad_enabled });
        Var { graph: self.id, idx: inner.nodes.len() - 1 }
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so a
    /// parameter shared across recurrent steps is one node in the graph.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        let mut inner = self.inner.borrow_mut();
        if let Some(&idx) = inner.params.get(&key) {
            return Var { graph: self.id, idx };
        }
        let requires_grad = self.grad_enabled && !inner.frozen.contains(&store.uid());
        inner.nodes.push(Node { value: Arc::clone(&store.param(id).value), op: Op::Leaf, requires_grad });
        let idx = inner.nodes.len() - 1;
        inner.params.insert(key, idx);
        Var { graph: self.id, idx }
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.inner.borrow().nodes[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.idx].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.idx].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.idx)?.as_ref()?;
        Some(Tensor::new(inner.nodes[v.idx].value.shape(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let inner = self.inner.borrow();
            let (va, vb) = (&inner.nodes[ia].value, &inner.nodes[ib].value);
            if va.shape() != vb.shape() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", va.shape(), vb.shape())));
            }
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        };
        Ok(self.push(value, op, &[ia, ib]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.idx, b.idx))
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let (scale, shift) = (S::from_f64(scale), S::from_f64(shift));
        let value = self.inner.borrow().nodes[ix].value.map(|v| scale * v + shift);
        Ok(self.push(value, Op::Affine { x: ix, scale }, &[ix]))
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[ix].value;
            match kind {
                Activation::Relu => v.map(|a| a.max(S::zero())),
                Activation::LeakyRelu(slope) => {
                    let slope = S::from_f64(slope);
                    v.map(|a| if a > S::zero() { a } else { a * slope })
                }
                Activation::Tanh => v.map(|a| a.tanh()),
                Activation::Sigmoid => v.map(sigmoid),
            }
        };
        Ok(self.push(value, Op::Act { x: ix, kind }, &[ix]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.inner.borrow().nodes[ix].value.map(softplus);
        Ok(self.push(value, Op::Softplus(ix), &[ix]))
    }

    /// `ln(max(x, eps))`; zero gradient where clamped.
    pub fn log_clamped(&self, x: Var, eps: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let eps = S::from_f64(eps);
        let value = self.inner.borrow().nodes[ix].value.map(|v| v.max(eps).ln());
        Ok(self.push(value, Op::LogClamped { x: ix, eps }, &[ix]))
    }

    /// Elementwise clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&self, x: Var, lo: S, hi: S) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.inner.borrow().nodes[ix].value.map(|v| v.max(lo).min(hi));
        Ok(self.push(value, Op::Clamp { x: ix, lo, hi }, &[ix]))
    }

    // ---- reductions and shape -------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.inner.borrow().nodes[ix].value.sum());
        Ok(self.push(value, Op::Sum(ix), &[ix]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[ix].value;
            if v.is_empty() {
                return Err(Error::Shape("mean of empty tensor".into()));
            }
            Tensor::scalar(v.sum() / S::from_f64(v.len() as f64))
        };
        Ok(self.push(value, Op::Mean(ix), &[ix]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = (*self.inner.borrow().nodes[ix].value).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(ix), &[ix]))
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let (value, parts, rows) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[*idx.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?].value.shape().to_vec();
            if first.len() != 2 {
                return Err(Error::Shape(format!("concat_cols expects 2-D tensors, got {first:?}")));
            }
            let rows = first[0];
            let mut parts = Vec::new();
            for &i in &idx {
                let s = inner.nodes[i].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::Dimension { axis: "batch", expected: rows, actual: s[0] });
                }
                parts.push((i, s[1]));
            }
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &(i, w) in &parts {
                    data.extend_from_slice(&inner.nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            (Tensor::new(&[rows, total], data)?, parts, rows)
        };
        Ok(self.push(value, Op::Concat { parts, rows }, &idx))
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn narrow_cols(&self, x: Var, start: usize, width: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[ix].value;
            let s = v.shape();
            if s.len() != 2 || start + width > s[1] {
                return Err(Error::Shape(format!("narrow {start}+{width} out of range for {s:?}")));
            }
            let mut data = Vec::with_capacity(s[0] * width);
            for r in 0..s[0] {
                data.extend_from_slice(&v.data()[r * s[1] + start..r * s[1] + start + width]);
            }
            Tensor::new(&[s[0], width], data)?
        };
        Ok(self.push(value, Op::Narrow { x: ix, start, width }, &[ix]))
    }

    // ---- layers -----------------------------------------------------------

    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (value, n, din, dout) = {
            let inner = self.inner.borrow();
            let (vx, vw) = (&inner.nodes[ix].value, &inner.nodes[iw].value);
            if vx.rank() != 2 || vw.rank() != 2 {
                return Err(Error::Shape(format!("linear expects 2-D input and weight, got {:?}, {:?}", vx.shape(), vw.shape())));
            }
            let (n, din, dout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
            if vw.shape()[1] != din {
                return Err(Error::Dimension { axis: "linear input features", expected: vw.shape()[1], actual: din });
            }
            let mut out = vec![S::zero(); n * dout];
            if let Some(ib) = ib {
                let vb = &inner.nodes[ib].value;
                if vb.len() != dout {
                    return Err(Error::Dimension { axis: "linear bias", expected: dout, actual: vb.len() });
                }
                for row in out.chunks_mut(dout) {
                    row.copy_from_slice(vb.data());
                }
            }
            let beta = if ib.is_some() { S::one() } else { S::zero() };
            S::gemm(n, din, dout, S::one(), vx.data(), (din as isize, 1), vw.data(), (1, din as isize), beta, &mut out, (dout as isize, 1));
            (Tensor::new(&[n, dout], out)?, n, din, dout)
        };
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        Ok(self.push(value, Op::Linear { x: ix, w: iw, b: ib, n, din, dout }, &parents))
    }

    fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
        match *shape {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("{what} expects an NCHW tensor, got {shape:?}"))),
        }
    }

    /// 2-D convolution without bias; weight is `cout×cin×k×k`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (value, geom, cout) = {
            let inner = self.inner.borrow();
            let (vx, vw) = (&inner.nodes[ix].value, &inner.nodes[iw].value);
            let (n, c, h, wd) = Self::nchw(vx.shape(), "conv2d input")?;
            let (cout, cin, k, k2) = Self::nchw(vw.shape(), "conv2d weight")?;
            if cin != c {
                return Err(Error::Dimension { axis: "conv2d input channels", expected: cin, actual: c });
            }
            if k != k2 {
                return Err(Error::Dimension { axis: "conv2d kernel width", expected: k, actual: k2 });
            }
            let ho = kernels::conv_out_size(h, k, stride, pad)
                .ok_or(Error::Dimension { axis: "conv2d height", expected: k, actual: h + 2 * pad })?;
            let wo = kernels::conv_out_size(wd, k, stride, pad)
                .ok_or(Error::Dimension { axis: "conv2d width", expected: k, actual: wd + 2 * pad })?;
            let geom = ConvGeom { n, c, h, w: wd, k, stride, pad, ho, wo };
            let out = kernels::conv2d_forward(vx.data(), vw.data(), cout, &geom);
            (Tensor::new(&[n, cout, ho, wo], out)?, geom, cout)
        };
        Ok(self.push(value, Op::Conv2d { x: ix, w: iw, geom, cout }, &[ix, iw]))
    }

    /// Transposed convolution without bias; weight is `cin×cout×k×k`.
    /// Output size is `(h−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (value, geom, cin) = {
            let inner = self.inner.borrow();
            let (vx, vw) = (&inner.nodes[ix].value, &inner.nodes[iw].value);
            let (n, c, h, wd) = Self::nchw(vx.shape(), "conv_transpose2d input")?;
            let (cin, cout, k, k2) = Self::nchw(vw.shape(), "conv_transpose2d weight")?;
            if cin != c {
                return Err(Error::Dimension { axis: "conv_transpose2d input channels", expected: cin, actual: c });
            }
            if k != k2 {
                return Err(Error::Dimension { axis: "conv_transpose2d kernel width", expected: k, actual: k2 });
            }
            let ho = kernels::conv_transpose_out_size(h, k, stride, pad)
                .ok_or(Error::Dimension { axis: "conv_transpose2d height", expected: 1, actual: h })?;
            let wo = kernels::conv_transpose_out_size(wd, k, stride, pad)
                .ok_or(Error::Dimension { axis: "conv_transpose2d width", expected: 1, actual: wd })?;
            // Geometry of the forward convolution this op is the adjoint of.
            let geom = ConvGeom { n, c: cout, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
            if kernels::conv_out_size(ho, k, stride, pad) != Some(h) {
                return Err(Error::Dimension { axis: "conv_transpose2d stride/padding", expected: h, actual: ho });
            }
            let out = kernels::conv_transpose2d_forward(vx.data(), vw.data(), cin, &geom);
            (Tensor::new(&[n, cout, ho, wo], out)?, geom, cin)
        };
        Ok(self.push(value, Op::ConvTranspose2d { x: ix, w: iw, geom, cin }, &[ix, iw]))
    }

    /// Batch normalization over `n×c×…`. In [`NormMode::Batch`] returns the
    /// batch mean and biased variance so the caller can update running stats;
    /// in [`NormMode::Running`] `stats` supplies them.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        stats: Option<(&[S], &[S])>,
        eps: f64,
    ) -> Result<(Var, Vec<S>, Vec<S>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let eps = S::from_f64(eps);
        let (value, xhat, inv_std, mean, var, n, c, p) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[ix].value;
            let s = vx.shape();
            if s.len() < 2 {
                return Err(Error::Shape(format!("batch_norm expects at least 2 axes, got {s:?}")));
            }
            let (n, c) = (s[0], s[1]);
            let p: usize = s[2..].iter().product();
            let (vg, vb) = (&inner.nodes[ig].value, &inner.nodes[ib].value);
            if vg.len() != c || vb.len() != c {
                return Err(Error::Dimension { axis: "batch_norm channels", expected: c, actual: vg.len() });
            }
            let (mean, var) = match mode {
                NormMode::Batch => {
                    if n < 2 {
                        return Err(Error::Invalid("batch_norm in training mode needs a batch of at least 2".into()));
                    }
                    kernels::channel_moments(vx.data(), n, c, p)
                }
                NormMode::Running => {
                    let (m, v) = stats.ok_or_else(|| Error::State("running statistics required".into()))?;
                    (m.to_vec(), v.to_vec())
                }
            };
            let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![S::zero(); vx.len()];
            let mut out = vec![S::zero(); vx.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * p;
                    let (g, b) = (vg.data()[ci], vb.data()[ci]);
                    for j in off..off + p {
                        let h = (vx.data()[j] - mean[ci]) * inv_std[ci];
                        xhat[j] = h;
                        out[j] = g * h + b;
                    }
                }
            }
            (Tensor::new(s, out)?, xhat, inv_std, mean, var, n, c, p)
        };
        let v = self.push(value, Op::BatchNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std, mode, n, c, p }, &[ix, ig, ib]);
        Ok((v, mean, var))
    }

    /// Average pooling without padding. The window must tile the input exactly.
    pub fn avg_pool(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let (value, nc, h, w) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[ix].value;
            let (n, c, h, w) = Self::nchw(vx.shape(), "avg_pool")?;
            if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                return Err(Error::Dimension { axis: "avg_pool window", expected: kernel, actual: h.min(w) });
            }
            if !(h - kernel).is_multiple_of(stride) {
                return Err(Error::Dimension { axis: "avg_pool height", expected: kernel, actual: h });
            }
            if !(w - kernel).is_multiple_of(stride) {
                return Err(Error::Dimension { axis: "avg_pool width", expected: kernel, actual: w });
            }
            let out = kernels::avg_pool_forward(vx.data(), n * c, h, w, kernel, stride);
            let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            (Tensor::new(&[n, c, ho, wo], out)?, n * c, h, w)
        };
        Ok(self.push(value, Op::AvgPool { x: ix, nc, h, w, k: kernel, s: stride }, &[ix]))
    }

    /// Layered compositing `m ⊙ f + (1 − m) ⊙ prev` with a single-channel
    /// mask broadcast over the colour channels of `f` and `prev`.
    pub fn blend(&self, m: Var, f: Var, prev: Var) -> Result<Var> {
        let (im, jf, ip) = (self.check(m)?, self.check(f)?, self.check(prev)?);
        let value = {
            let inner = self.inner.borrow();
            let (vm, vf, vp) = (&inner.nodes[im].value, &inner.nodes[jf].value, &inner.nodes[ip].value);
            if vf.shape() != vp.shape() {
                return Err(Error::Shape(format!("blend: foreground {:?} vs canvas {:?}", vf.shape(), vp.shape())));
            }
            let (n, _, h, w) = Self::nchw(vf.shape(), "blend")?;
            if vm.shape() != [n, 1, h, w] {
                return Err(Error::Shape(format!("blend: mask {:?} must be {:?}", vm.shape(), [n, 1, h, w])));
            }
            Tensor::new(vf.shape(), blend_pixels(vm.data(), vf.data(), vp.data(), n, h * w))?
        };
        Ok(self.push(value, Op::Blend { m: im, f: jf, prev: ip }, &[im, jf, ip]))
    }

    // ---- spatial transformer ---------------------------------------------

    /// Raw `n×6` head output → constrained pose (see [`stn::constrain_pose`]).
    pub fn constrain_pose(&self, raw: Var, s_min: f64) -> Result<Var> {
        let ir = self.check(raw)?;
        if s_min.is_nan() || s_min < 1.0 {
            return Err(Error::Config(format!("s_min must be at least 1, got {s_min}")));
        }
        let s_min = S::from_f64(s_min);
        let value = {
            let inner = self.inner.borrow();
            let vr = &inner.nodes[ir].value;
            if vr.rank() != 2 || vr.shape()[1] != 6 {
                return Err(Error::Dimension { axis: "pose width", expected: 6, actual: *vr.shape().last().unwrap_or(&0) });
            }
            Tensor::new(vr.shape(), stn::constrain_pose_slice(vr.data(), s_min))?
        };
        Ok(self.push(value, Op::ConstrainPose { raw: ir, s_min }, &[ir]))
    }

    /// `n×6` affine matrices → `n×h×w×2` sampling grid.
    pub fn affine_grid(&self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let it = self.check(theta)?;
        let value = {
            let inner = self.inner.borrow();
            let vt = &inner.nodes[it].value;
            if vt.rank() != 2 || vt.shape()[1] != 6 {
                return Err(Error::Dimension { axis: "affine width", expected: 6, actual: *vt.shape().last().unwrap_or(&0) });
            }
            if h == 0 || w == 0 {
                return Err(Error::Shape("grid size must be at least 1×1".into()));
            }
            let n = vt.shape()[0];
            Tensor::new(&[n, h, w, 2], stn::affine_grid_slice(vt.data(), n, h, w))?
        };
        Ok(self.push(value, Op::AffineGrid { theta: it, h, w }, &[it]))
    }

    /// Bilinear sampling of `x` at `grid` with zeros outside the source extent.
    pub fn grid_sample(&self, x: Var, grid: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(grid)?);
        let value = {
            let inner = self.inner.borrow();
            let (vx, vg) = (&inner.nodes[ix].value, &inner.nodes[ig].value);
            let (n, c, h, w) = Self::nchw(vx.shape(), "grid_sample input")?;
            let (gn, ho, wo, two) = Self::nchw(vg.shape(), "grid_sample grid")?;
            if gn != n {
                return Err(Error::Dimension { axis: "grid batch", expected: n, actual: gn });
            }
            if two != 2 {
                return Err(Error::Dimension { axis: "grid coordinates", expected: 2, actual: two });
            }
            let out = stn::grid_sample_slice(vx.data(), vg.data(), n, c, h, w, ho, wo);
            Tensor::new(&[n, c, ho, wo], out)?
        };
        Ok(self.push(value, Op::GridSample { x: ix, grid: ig }, &[ix, ig]))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean softmax cross-entropy of `n×k` logits against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let (value, probs) = {
            let inner = self.inner.borrow();
            let vl = &inner.nodes[il].value;
            if vl.rank() != 2 || vl.shape()[0] != labels.len() {
                return Err(Error::Dimension { axis: "cross_entropy batch", expected: labels.len(), actual: vl.shape()[0] });
            }
            let k = vl.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Invalid(format!("label {bad} outside 0..{k}")));
            }
            let probs = softmax_rows(vl.data(), k);
            let n = S::from_f64(labels.len() as f64);
            let loss = labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -(probs[r * k + l].max(S::min_positive_value())).ln())
                .sum::<S>()
                / n;
            (Tensor::scalar(loss), probs)
        };
        Ok(self.push(value, Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs }, &[il]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `loss`. May run once per recorded pass.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Graph("backward already ran on this graph; reset it first".into()));
        }
        if inner.nodes[il].value.len() != 1 {
            return Err(Error::Graph(format!("loss must be a scalar, got shape {:?}", inner.nodes[il].value.shape())));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[il] = Some(vec![S::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop_node(nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        inner.grads = grads;
        inner.backward_done = true;
        Ok(())
    }

    /// Adds this graph's gradients for parameters of `store` into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) {
        let inner = self.inner.borrow();
        for (&(uid, index), &node) in &inner.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(Some(g)) = inner.grads.get(node) {
                store.accumulate_grad(index, g);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], idx: usize, contrib: Vec<S>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with<S: Scalar>(grads: &mut [Option<Vec<S>>], idx: usize, len: usize, f: impl Fn(usize) -> S) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().enumerate().for_each(|(j, a)| *a += f(j)),
        slot @ None => *slot = Some((0..len).map(f).collect()),
    }
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let needs = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| nodes[p].value.data();
    let len = g.len();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if needs(p) {
                    accumulate(grads, p, g.to_vec());
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate_with(grads, *b, len, |j| -g[j]);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                accumulate_with(grads, *a, len, |j| g[j] * vb[j]);
            }
            if needs(*b) {
                accumulate_with(grads, *b, len, |j| g[j] * va[j]);
            }
        }
        Op::Affine { x, scale } => {
            if needs(*x) {
                accumulate_with(grads, *x, len, |j| g[j] * *scale);
            }
        }
        Op::Act { x, kind } => {
            if needs(*x) {
                let (vx, y) = (val(*x), nodes[i].value.data());
                match *kind {
                    Activation::Relu => accumulate_with(grads, *x, len, |j| if vx[j] > S::zero() { g[j] } else { S::zero() }),
                    Activation::LeakyRelu(slope) => {
                        let slope = S::from_f64(slope);
                        accumulate_with(grads, *x, len, |j| if vx[j] > S::zero() { g[j] } else { g[j] * slope })
                    }
                    Activation::Tanh => accumulate_with(grads, *x, len, |j| g[j] * (S::one() - y[j] * y[j])),
                    Activation::Sigmoid => accumulate_with(grads, *x, len, |j| g[j] * y[j] * (S::one() - y[j])),
                }
            }
        }
        Op::Softplus(x) => {
            if needs(*x) {
                let vx = val(*x);
                accumulate_with(grads, *x, len, |j| g[j] * sigmoid(vx[j]));
            }
        }
        Op::LogClamped { x, eps } => {
            if needs(*x) {
                let vx = val(*x);
                accumulate_with(grads, *x, len, |j| if vx[j] > *eps { g[j] / vx[j] } else { S::zero() });
            }
        }
        Op::Clamp { x, lo, hi } => {
            if needs(*x) {
                let vx = val(*x);
                accumulate_with(grads, *x, len, |j| if vx[j] >= *lo && vx[j] <= *hi { g[j] } else { S::zero() });
            }
        }
        Op::Sum(x) => {
            if needs(*x) {
                let n = nodes[*x].value.len();
                accumulate_with(grads, *x, n, |_| g[0]);
            }
        }
        Op::Mean(x) => {
            if needs(*x) {
                let n = nodes[*x].value.len();
                let gv = g[0] / S::from_f64(n as f64);
                accumulate_with(grads, *x, n, |_| gv);
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                accumulate(grads, *x, g.to_vec());
            }
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if needs(p) {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..*rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, part);
                }
                offset += w;
            }
        }
        Op::Narrow { x, start, width } => {
            if needs(*x) {
                let cols = nodes[*x].value.shape()[1];
                let rows = len / width;
                let mut full = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    full[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, *x, full);
            }
        }
        Op::Linear { x, w, b, n, din, dout } => {
            let (n, din, dout) = (*n, *din, *dout);
            if needs(*x) {
                let mut dx = vec![S::zero(); n * din];
                S::gemm(n, dout, din, S::one(), g, (dout as isize, 1), val(*w), (din as isize, 1), S::zero(), &mut dx, (din as isize, 1));
                accumulate(grads, *x, dx);
            }
            if needs(*w) {
                let mut dw = vec![S::zero(); dout * din];
                S::gemm(dout, n, din, S::one(), g, (1, dout as isize), val(*x), (din as isize, 1), S::zero(), &mut dw, (din as isize, 1));
                accumulate(grads, *w, dw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![S::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::Conv2d { x, w, geom, cout } => {
            let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), g, *cout, geom, needs(*x), needs(*w));
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
        }
        Op::ConvTranspose2d { x, w, geom, cin } => {
            let (dx, dw) = kernels::conv_transpose2d_backward(val(*x), val(*w), g, *cin, geom, needs(*x), needs(*w));
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode, n, c, p } => {
            let (n, c, p) = (*n, *c, *p);
            let gm = val(*gamma);
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * p;
                    for j in off..off + p {
                        dgamma[ci] += g[j] * xhat[j];
                        dbeta[ci] += g[j];
                    }
                }
            }
            if needs(*x) {
                let mut dx = vec![S::zero(); len];
                let m = S::from_f64((n * p) as f64);
                for ci in 0..c {
                    let scale = gm[ci] * inv_std[ci];
                    for ni in 0..n {
                        let off = (ni * c + ci) * p;
                        for j in off..off + p {
                            dx[j] = match mode {
                                NormMode::Batch => scale * (g[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m),
                                NormMode::Running => scale * g[j],
                            };
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            if needs(*gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if needs(*beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
        Op::AvgPool { x, nc, h, w, k, s } => {
            if needs(*x) {
                accumulate(grads, *x, kernels::avg_pool_backward(g, *nc, *h, *w, *k, *s));
            }
        }
        Op::Blend { m, f, prev } => {
            let (vm, vf, vp) = (val(*m), val(*f), val(*prev));
            let shape = nodes[*f].value.shape();
            let (n, ch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            if needs(*m) {
                let mut dm = vec![S::zero(); n * plane];
                for ni in 0..n {
                    for ci in 0..ch {
                        let off = (ni * ch + ci) * plane;
                        for q in 0..plane {
                            dm[ni * plane + q] += g[off + q] * (vf[off + q] - vp[off + q]);
                        }
                    }
                }
                accumulate(grads, *m, dm);
            }
            let mask_at = |j: usize| vm[(j / (ch * plane)) * plane + j % plane];
            if needs(*f) {
                accumulate_with(grads, *f, len, |j| g[j] * mask_at(j));
            }
            if needs(*prev) {
                accumulate_with(grads, *prev, len, |j| g[j] * (S::one() - mask_at(j)));
            }
        }
        Op::ConstrainPose { raw, s_min } => {
            if needs(*raw) {
                accumulate(grads, *raw, stn::constrain_pose_backward(val(*raw), g, *s_min));
            }
        }
        Op::AffineGrid { theta, h, w } => {
            if needs(*theta) {
                let n = nodes[*theta].value.shape()[0];
                accumulate(grads, *theta, stn::affine_grid_backward(g, n, *h, *w));
            }
        }
        Op::GridSample { x, grid } => {
            let xs = nodes[*x].value.shape();
            let gs = nodes[*grid].value.shape();
            let (dx, dgrid) = stn::grid_sample_backward(
                val(*x),
                val(*grid),
                g,
                (xs[0], xs[1], xs[2], xs[3]),
                (gs[1], gs[2]),
                needs(*x),
                needs(*grid),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dg) = dgrid {
                accumulate(grads, *grid, dg);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if needs(*logits) {
                let k = probs.len() / labels.len();
                let scale = g[0] / S::from_f64(labels.len() as f64);
                let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of an `n×k` matrix.
pub fn softmax_rows<S: Scalar>(logits: &[S], k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut z = S::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / z);
    }
    out
}

/// The compositing formula on raw buffers; `m` is `n×plane`, the others
/// `n×c×plane`. Shared by the graph op and by exactness checks.
pub fn blend_pixels<S: Scalar>(m: &[S], f: &[S], prev: &[S], n: usize, plane: usize) -> Vec<S> {
    let ch = f.len() / (n * plane).max(1);
    let mut out = vec![S::zero(); f.len()];
    for ni in 0..n {
        let mask = &m[ni * plane..(ni + 1) * plane];
        for ci in 0..ch {
            let off = (ni * ch + ci) * plane;
            for q in 0..plane {
                out[off + q] = mask[q] * f[off + q] + (S::one() - mask[q]) * prev[off + q];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;

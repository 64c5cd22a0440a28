//! Parameterized layers on top of the autodiff graph.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{BufferId, Graph, NormMode, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// How batch-norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    Sample,
    /// Running statistics.
    Eval,
}

/// Running mean and variance buffers with their new values.
type StatUpdate<S> = (BufferId, BufferId, Vec<S>, Vec<S>);

/// A forward pass in progress: the tape, the parameters it reads and the
/// running-statistics updates it has produced so far.
pub struct Ctx<'a, S: Scalar = f32> {
    pub g: &'a Graph<S>,
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    pending: RefCell<Vec<StatUpdate<S>>>,
}

/// Running-statistics updates collected by a [`Ctx`].
pub struct StatUpdates<S>(Vec<(BufferId, BufferId, Vec<S>, Vec<S>)>);

impl<S: Scalar> StatUpdates<S> {
    pub fn apply(self, store: &mut ParamStore<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        for (mean_id, var_id, mean, var) in self.0 {
            for (r, &b) in store.buffer_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                *r = (S::one() - m) * *r + m * b;
            }
            for (r, &b) in store.buffer_mut(var_id).data_mut().iter_mut().zip(&var) {
                *r = (S::one() - m) * *r + m * b;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(g: &'a Graph<S>, store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self { g, store, mode, pending: RefCell::new(Vec::new()) }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn finish(self) -> StatUpdates<S> {
        StatUpdates(self.pending.into_inner())
    }
}

fn normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Tensor<S> {
    let d = Normal::new(mean, std).expect("valid normal");
    Tensor::from_fn(shape, |_| S::from_f64(d.sample(rng)))
}

fn uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let d = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Tensor::from_fn(shape, |_| S::from_f64(d.sample(rng)))
}

/// Fully connected layer, weight `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, din: usize, dout: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let weight = store.add_param(&format!("{name}.weight"), uniform(rng, &[dout, din], din))?;
        let bias = if bias { Some(store.add_param(&format!("{name}.bias"), uniform(rng, &[dout], din))?) } else { None };
        Ok(Self { weight, bias, din, dout })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        cx.g.linear(x, cx.param(self.weight), self.bias.map(|b| cx.param(b)))
    }
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_param(&format!("{name}.weight"), normal(rng, &[cout, cin, k, k], 0.0, 0.02))?;
        Ok(Self { weight, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        cx.g.conv2d(x, cx.param(self.weight), self.stride, self.pad)
    }
}

/// Bias-free transposed convolution, weight `cin×cout×k×k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_param(&format!("{name}.weight"), normal(rng, &[cin, cout, k, k], 0.0, 0.02))?;
        Ok(Self { weight, stride, pad })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        cx.g.conv_transpose2d(x, cx.param(self.weight), self.stride, self.pad)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.gamma"), normal(rng, &[c], 1.0, 0.02))?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[c], S::one()))?,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        let (gamma, beta) = (cx.param(self.gamma), cx.param(self.beta));
        match cx.mode {
            Mode::Eval => {
                let stats = (cx.store.buffer(self.running_mean).data(), cx.store.buffer(self.running_var).data());
                Ok(cx.g.batch_norm(x, gamma, beta, NormMode::Running, Some(stats), BN_EPS)?.0)
            }
            Mode::Train | Mode::Sample => {
                let shape = cx.g.shape(x);
                let (y, mean, var) = cx.g.batch_norm(x, gamma, beta, NormMode::Batch, None, BN_EPS)?;
                if cx.mode == Mode::Train {
                    let m: usize = shape[0] * shape[2..].iter().product::<usize>();
                    let unbias = S::from_f64(m as f64 / (m as f64 - 1.0).max(1.0));
                    let var = var.into_iter().map(|v| v * unbias).collect();
                    cx.pending.borrow_mut().push((self.running_mean, self.running_var, mean, var));
                }
                Ok(y)
            }
        }
    }
}

/// LSTM cell with gate order (input, forget, candidate, output) and a single
/// bias vector.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_ih: store.add_param(&format!("{name}.w_ih"), uniform(rng, &[4 * hidden, input], hidden))?,
            w_hh: store.add_param(&format!("{name}.w_hh"), uniform(rng, &[4 * hidden, hidden], hidden))?,
            bias: store.add_param(&format!("{name}.bias"), uniform(rng, &[4 * hidden], hidden))?,
            input,
            hidden,
        })
    }

    /// One step; returns `(h, c)`.
    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, z: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        lstm_step(cx.g, [cx.param(self.w_ih), cx.param(self.w_hh), cx.param(self.bias)], z, h, c)
    }
}

/// LSTM arithmetic on explicit weight variables `[w_ih, w_hh, bias]`.
pub fn lstm_step<S: Scalar>(g: &Graph<S>, [w_ih, w_hh, bias]: [Var; 3], z: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hd = g.shape(h)[1];
    let gates = g.add(g.linear(z, w_ih, Some(bias))?, g.linear(h, w_hh, None)?)?;
    let i = g.sigmoid(g.narrow_cols(gates, 0, hd)?)?;
    let f = g.sigmoid(g.narrow_cols(gates, hd, hd)?)?;
    let cand = g.tanh(g.narrow_cols(gates, 2 * hd, hd)?)?;
    let o = g.sigmoid(g.narrow_cols(gates, 3 * hd, hd)?)?;
    let c_new = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
    let h_new = g.mul(o, g.tanh(c_new)?)?;
    Ok((h_new, c_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all<S: Scalar>(store: &mut ParamStore<S>) {
        for p in store.params_mut() {
            std::sync::Arc::make_mut(&mut p.value).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        zero_all(&mut store);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let z = g.input(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let zero = g.input(Tensor::zeros(&[2, 4]));
        let (h, c) = cell.forward(&cx, z, zero, zero).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 2, &mut rng).unwrap();
        zero_all(&mut store);
        let b = store.value_mut(cell.bias);
        // input gate → 0, forget gate → 1
        b.data_mut()[..2].fill(-1e30);
        b.data_mut()[2..4].fill(1e30);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let z = g.input(Tensor::from_fn(&[1, 3], |i| i as f32));
        let h = g.input(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        let c_prev = Tensor::new(&[1, 2], vec![1.25, -3.5]).unwrap();
        let c = g.input(c_prev.clone());
        let (_, c_new) = cell.forward(&cx, z, h, c).unwrap();
        assert_eq!(*g.value(c_new), c_prev);
    }

    #[test]
    fn identity_linear_and_bias_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 3, true, &mut rng).unwrap();
        *store.value_mut(lin.weight) = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        *store.value_mut(lin.bias.unwrap()) = Tensor::zeros(&[3]);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let y = lin.forward(&cx, g.input(x.clone())).unwrap();
        assert_eq!(*g.value(y), x);

        *store.value_mut(lin.weight) = Tensor::zeros(&[3, 3]);
        *store.value_mut(lin.bias.unwrap()) = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let y = lin.forward(&cx, g.input(x)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn batch_norm_train_updates_running_stats_and_eval_uses_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, &mut rng).unwrap();
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        bn.forward(&cx, g.input(x.clone())).unwrap();
        cx.finish().apply(&mut store);
        // mean 2.5, unbiased var 5/3
        assert!((store.buffer(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.buffer(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Eval);
        let single = Tensor::new(&[1, 1, 1, 1], vec![0.25]).unwrap();
        let y = bn.forward(&cx, g.input(single)).unwrap();
        assert!((g.value(y).data()[0] - 0.0).abs() < 1e-12);
        assert!(cx.finish().is_empty());
    }

    #[test]
    fn batch_of_one_in_train_mode_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, &mut rng).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        assert!(bn.forward(&cx, g.input(Tensor::zeros(&[1, 2, 2, 2]))).is_err());
    }
}

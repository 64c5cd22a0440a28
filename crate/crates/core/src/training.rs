//! Adversarial training: losses, Adam, the alternating update and the
//! epoch loop with resumable progress.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::TrainConfig;
use crate::data::synth::sample_seed;
use crate::data::ImageSet;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{Ctx, Mode};
use crate::tensor::{Scalar, Tensor};
use crate::variants::VariantKind;

/// Floor inside every adversarial logarithm.
pub const LOG_EPS: f64 = 1e-7;

/// `−mean ln D(x) − mean ln(1 − D(G(z)))`.
pub fn discriminator_loss<S: Scalar>(g: &Graph<S>, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = g.mean(g.log_clamped(d_real, LOG_EPS)?)?;
    let fake = g.mean(g.log_clamped(g.affine(d_fake, -1.0, 1.0)?, LOG_EPS)?)?;
    g.affine(g.add(real, fake)?, -1.0, 0.0)
}

/// Non-saturating `−mean ln D(G(z))`, or the literal minimax
/// `mean ln(1 − D(G(z)))` when `minimax` is set.
pub fn generator_loss<S: Scalar>(g: &Graph<S>, d_fake: Var, minimax: bool) -> Result<Var> {
    if minimax {
        g.mean(g.log_clamped(g.affine(d_fake, -1.0, 1.0)?, LOG_EPS)?)
    } else {
        g.affine(g.mean(g.log_clamped(d_fake, LOG_EPS)?)?, -1.0, 0.0)
    }
}

/// Mean squared error between two same-shaped tensors.
pub fn mse<S: Scalar>(g: &Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    g.mean(g.mul(d, d)?)
}

/// Conditional generator objective: adversarial loss plus `λ·MSE`.
pub fn conditional_loss<S: Scalar>(
    g: &Graph<S>,
    d_recon: Var,
    x_input: Var,
    x_recon: Var,
    lambda: f64,
    minimax: bool,
) -> Result<(Var, Var)> {
    let rec = mse(g, x_recon, x_input)?;
    let adv = generator_loss(g, d_recon, minimax)?;
    Ok((g.add(adv, g.affine(rec, lambda, 0.0)?)?, rec))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.params().iter().map(|p| vec![S::zero(); p.value.len()]).collect::<Vec<_>>();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let c1 = S::from_f64(1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = S::from_f64(1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let (lr, eps) = (S::from_f64(self.lr), S::from_f64(self.eps));
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let value = std::sync::Arc::make_mut(&mut p.value);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment tensors named after their parameters.
    pub fn state(&self, store: &ParamStore<S>, prefix: &str) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, p) in store.params().iter().enumerate() {
            let shape = p.value.shape();
            out.push((format!("{prefix}.m.{}", p.name), Tensor::new(shape, self.m[i].clone()).expect("moment shape")));
            out.push((format!("{prefix}.v.{}", p.name), Tensor::new(shape, self.v[i].clone()).expect("moment shape")));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<S>, prefix: &str, table: &[(String, Tensor<S>)], t: u64) -> Result<()> {
        let lookup = |name: &str| {
            table
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Invalid(format!("optimizer state `{name}` missing from checkpoint")))
        };
        for (i, p) in store.params().iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let src = lookup(&format!("{prefix}.{kind}.{}", p.name))?;
                if src.shape() != p.value.shape() {
                    return Err(Error::Shape(format!("optimizer state for `{}` has shape {:?}", p.name, src.shape())));
                }
                dst.copy_from_slice(src.data());
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Position in the epoch loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Optimizer steps taken.
    pub step: u64,
    pub epoch: usize,
    /// Batches finished within `epoch`.
    pub batch: usize,
}

/// Scalars reported after each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Mean discriminator output on real and on generated images.
    pub d_real: f64,
    pub d_fake: f64,
    /// Reconstruction error of the conditional variant.
    pub mse: Option<f64>,
}

/// Example order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ 0x6570_6f63_685f_6f72, epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Generator, discriminator, optimizers and noise stream of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_store: ParamStore<f32>,
    pub d_store: ParamStore<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    /// Noise source for every generator draw during training.
    pub rng: ChaCha8Rng,
    pub progress: Progress,
}

fn scalar_of(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn mean_of(g: &Graph<f32>, v: Var) -> f64 {
    let t = g.value(v);
    t.data().iter().map(|&x| x as f64).sum::<f64>() / t.len().max(1) as f64
}

fn first_bad_grad(store: &ParamStore<f32>) -> Option<String> {
    store.params().iter().find(|p| !p.grad.is_finite()).map(|p| p.name.clone())
}

impl Trainer {
    /// Fresh models initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g_store = ParamStore::new();
        let mut d_store = ParamStore::new();
        let m = &config.model;
        let generator = Generator::new(m.clone(), &mut g_store, &mut init)?;
        let discriminator = Discriminator::new(&mut d_store, m.image_size, m.channels, &m.d_widths, &mut init)?;
        let g_opt = Adam::new(&g_store, config.lr_g, config.beta1, config.beta2, config.adam_eps);
        let d_opt = Adam::new(&d_store, config.lr_d, config.beta1, config.beta2, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { config, generator, discriminator, g_store, d_store, g_opt, d_opt, rng, progress: Progress::default() })
    }

    fn conditional(&self) -> bool {
        self.config.model.variant == VariantKind::Conditional
    }

    fn check_shape(&self, real: &Tensor<f32>) -> Result<()> {
        let m = &self.config.model;
        let want = [real.shape().first().copied().unwrap_or(0), m.channels, m.image_size, m.image_size];
        if real.shape() != want {
            return Err(Error::Shape(format!("training batch {:?}, model expects n×{}×{}×{}", real.shape(), m.channels, m.image_size, m.image_size)));
        }
        if want[0] < 2 {
            return Err(Error::Invalid("training batches need at least two images".into()));
        }
        Ok(())
    }

    fn non_finite(&self, detail: String) -> Error {
        Error::NonFinite { step: self.progress.step + 1, detail }
    }

    /// One discriminator update on `real` and fresh samples, then one
    /// generator update through the frozen discriminator.
    pub fn train_step(&mut self, real: &Tensor<f32>) -> Result<StepReport> {
        self.check_shape(real)?;
        let n = real.shape()[0];
        let conditional = self.conditional();

        let fake = {
            let g = Graph::no_grad();
            let cx = Ctx::new(&g, &self.g_store, Mode::Sample);
            let x = if conditional {
                self.generator.reconstruct(&cx, g.input(real.clone()))?.image()
            } else {
                let z: Vec<Var> = self.generator.sample_noise(n, &mut self.rng).into_iter().map(|t| g.input(t)).collect();
                self.generator.generate(&cx, &z)?.image()
            };
            (*g.value(x)).clone()
        };

        let (loss_d, d_real, d_fake) = {
            let g = Graph::new();
            let cx = Ctx::new(&g, &self.d_store, Mode::Train);
            let out_real = self.discriminator.forward(&cx, g.input(real.clone()))?;
            let out_fake = self.discriminator.forward(&cx, g.input(fake.clone()))?;
            let loss = discriminator_loss(&g, out_real.prob, out_fake.prob)?;
            let stats = (scalar_of(&g, loss), mean_of(&g, out_real.prob), mean_of(&g, out_fake.prob));
            let logits_finite = g.value(out_real.logit).is_finite() && g.value(out_fake.logit).is_finite();
            if !stats.0.is_finite() || !logits_finite {
                return Err(self.non_finite(format!(
                    "discriminator loss {} (D(real) {}, D(fake) {}, max |fake| {})",
                    stats.0,
                    stats.1,
                    stats.2,
                    fake.max_abs()
                )));
            }
            g.backward(loss)?;
            let updates = cx.finish();
            self.d_store.zero_grads();
            g.accumulate_param_grads(&mut self.d_store);
            drop(g);
            if let Some(name) = first_bad_grad(&self.d_store) {
                return Err(self.non_finite(format!("non-finite discriminator gradient in `{name}` (loss {})", stats.0)));
            }
            updates.apply(&mut self.d_store);
            self.d_opt.step(&mut self.d_store);
            stats
        };

        let (loss_g, rec) = {
            let g = Graph::new();
            g.freeze(&self.d_store);
            let gcx = Ctx::new(&g, &self.g_store, Mode::Train);
            let dcx = Ctx::new(&g, &self.d_store, Mode::Sample);
            let (loss, rec) = if conditional {
                let x_in = g.input(real.clone());
                let out = self.generator.reconstruct(&gcx, x_in)?;
                let d = self.discriminator.forward(&dcx, out.image())?;
                let (loss, rec) = conditional_loss(&g, d.prob, x_in, out.image(), self.config.model.lambda_rec, self.config.minimax)?;
                (loss, Some(rec))
            } else {
                let z: Vec<Var> = self.generator.sample_noise(n, &mut self.rng).into_iter().map(|t| g.input(t)).collect();
                let out = self.generator.generate(&gcx, &z)?;
                let d = self.discriminator.forward(&dcx, out.image())?;
                (generator_loss(&g, d.prob, self.config.minimax)?, None)
            };
            let lv = scalar_of(&g, loss);
            let rv = rec.map(|r| scalar_of(&g, r));
            if !lv.is_finite() {
                return Err(self.non_finite(format!("generator loss {lv} (reconstruction {rv:?}, D(real) {d_real}, D(fake) {d_fake})")));
            }
            g.backward(loss)?;
            let updates = gcx.finish();
            drop(dcx);
            self.g_store.zero_grads();
            g.accumulate_param_grads(&mut self.g_store);
            drop(g);
            if let Some(name) = first_bad_grad(&self.g_store) {
                return Err(self.non_finite(format!("non-finite generator gradient in `{name}` (loss {lv})")));
            }
            updates.apply(&mut self.g_store);
            self.g_opt.step(&mut self.g_store);
            (lv, rv)
        };

        self.progress.step += 1;
        Ok(StepReport { step: self.progress.step, epoch: self.progress.epoch, loss_d, loss_g, d_real, d_fake, mse: rec })
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n / self.config.batch_size
    }

    /// Runs the remaining epochs over `data`. `on_step` sees every report
    /// after progress is updated and may stop the run early.
    pub fn run(&mut self, data: &ImageSet, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<ControlFlow<()>>) -> Result<()> {
        let nb = self.batches_per_epoch(data.len());
        if nb == 0 {
            return Err(Error::Config(format!("{} images do not fill one batch of {}", data.len(), self.config.batch_size)));
        }
        let bs = self.config.batch_size;
        while self.progress.epoch < self.config.epochs {
            let order = epoch_order(self.config.seed, self.progress.epoch, data.len());
            while self.progress.batch < nb {
                let b = self.progress.batch;
                let real = data.batch(&order[b * bs..(b + 1) * bs]);
                let report = self.train_step(&real)?;
                self.progress.batch += 1;
                if on_step(self, &report)?.is_break() {
                    return Ok(());
                }
            }
            self.progress.epoch += 1;
            self.progress.batch = 0;
        }
        Ok(())
    }
}

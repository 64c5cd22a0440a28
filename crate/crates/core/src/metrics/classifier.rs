//! Discriminator-style classifiers and the scores built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, Graph, ParamStore, Var};
use crate::data::ImageSet;
use crate::discriminator::{ConvStack, Discriminator};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, Mode};
use crate::tensor::{Scalar, Tensor};
use crate::training::{epoch_order, Adam};

/// Floor applied to both distributions inside the divergence.
pub const KL_EPS: f64 = 1e-7;

const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Convolution widths of the trunk, as in the discriminator.
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Flatten the last feature map instead of average pooling it.
    pub flatten: bool,
    /// Shift and scale every image to zero mean and unit variance first.
    pub standardize: bool,
}

impl ClassifierConfig {
    pub fn new(widths: &[usize]) -> Self {
        Self { widths: widths.to_vec(), hidden: 256, epochs: 10, batch_size: 64, lr: 1e-3, seed: 0, flatten: false, standardize: true }
    }
}

/// Conv trunk, global average pool, two fully connected layers, softmax.
pub struct Classifier {
    trunk: ConvStack,
    fc1: Linear,
    fc2: Linear,
    pub store: ParamStore<f32>,
    pub num_classes: usize,
    flatten: bool,
    standardize: bool,
}

impl Classifier {
    pub fn new(image_size: usize, channels: usize, num_classes: usize, config: &ClassifierConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let trunk = ConvStack::new(&mut store, "clf", channels, image_size, &config.widths, &mut rng)?;
        let din = if config.flatten { trunk.out_channels * trunk.out_size * trunk.out_size } else { trunk.out_channels };
        let fc1 = Linear::new(&mut store, "clf.fc1", din, config.hidden, true, &mut rng)?;
        let fc2 = Linear::new(&mut store, "clf.fc2", config.hidden, num_classes, true, &mut rng)?;
        Ok(Self { trunk, fc1, fc2, store, num_classes, flatten: config.flatten, standardize: config.standardize })
    }

    /// The network input for a batch of images.
    pub fn prepare(&self, images: Tensor<f32>) -> Tensor<f32> {
        if self.standardize {
            standardize(images)
        } else {
            images
        }
    }

    fn logits(&self, cx: &Ctx<f32>, x: Var) -> Result<Var> {
        let f = self.trunk.forward(cx, x)?;
        let k = self.trunk.out_size;
        let n = cx.g.shape(x)[0];
        let c = self.trunk.out_channels;
        let flat = if self.flatten { cx.g.reshape(f, &[n, c * k * k])? } else { cx.g.reshape(cx.g.avg_pool(f, k, k)?, &[n, c])? };
        let h = cx.g.relu(self.fc1.forward(cx, flat)?)?;
        self.fc2.forward(cx, h)
    }

    /// Class probabilities, `n×K`, using running normalization statistics.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f64>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.num_classes);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
            let g = Graph::no_grad();
            let cx = Ctx::new(&g, &self.store, Mode::Eval);
            let logits = self.logits(&cx, g.input(self.prepare(images.select(&idx))))?;
            let l64: Vec<f64> = g.value(logits).data().iter().map(|&v| v as f64).collect();
            out.extend(softmax_rows(&l64, self.num_classes));
        }
        Tensor::new(&[n, self.num_classes], out)
    }
}

/// Cross-entropy training with Adam under a cosine learning-rate decay,
/// deterministic in `config.seed`.
pub fn train_classifier(set: &ImageSet, num_classes: usize, config: &ClassifierConfig) -> Result<Classifier> {
    if set.is_empty() {
        return Err(Error::Invalid("cannot train a classifier on an empty set".into()));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{num_classes}")));
    }
    let first = set.labels[0];
    if set.labels.iter().all(|&l| l == first) {
        return Err(Error::Invalid("classifier training needs at least two classes".into()));
    }
    let (c, h, _) = set.image_shape();
    let mut clf = Classifier::new(h, c, num_classes, config)?;
    let mut opt = Adam::new(&clf.store, config.lr, 0.9, 0.999, 1e-8);
    let bs = config.batch_size.max(2);
    let per_epoch = set.len().div_ceil(bs);
    let total = (per_epoch * config.epochs).max(1) as f64;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, set.len());
        for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
            opt.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            step += 1;
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let g = Graph::new();
            let cx = Ctx::new(&g, &clf.store, Mode::Train);
            let logits = clf.logits(&cx, g.input(clf.prepare(set.batch(chunk))))?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite { step: epoch as u64, detail: format!("classifier loss {lv}") });
            }
            g.backward(loss)?;
            let updates = cx.finish();
            clf.store.zero_grads();
            g.accumulate_param_grads(&mut clf.store);
            drop(g);
            updates.apply(&mut clf.store);
            opt.step(&mut clf.store);
        }
    }
    Ok(clf)
}

/// Per-image zero mean and unit variance; constant images become zero.
pub fn standardize(mut images: Tensor<f32>) -> Tensor<f32> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return images;
    }
    let d = images.len() / n;
    for img in images.data_mut().chunks_exact_mut(d) {
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        img.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    }
    images
}

/// Top-1 accuracy of `n×K` probabilities; ties go to the lower class.
pub fn accuracy(probs: &Tensor<f64>, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &probs.data()[i * k..(i + 1) * k];
            let best = row.iter().enumerate().fold(0, |b, (j, &p)| if p > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean over rows of `KL(p ‖ q)` in nats with both sides floored at [`KL_EPS`].
pub fn mean_kl(p: &Tensor<f64>, q: &Tensor<f64>) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 2 {
        return Err(Error::Shape(format!("mean_kl: {:?} vs {:?}", p.shape(), q.shape())));
    }
    let (n, k) = (p.shape()[0], p.shape()[1]);
    if n == 0 {
        return Err(Error::Invalid("mean_kl of zero rows".into()));
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let a = p.data()[i * k + j].max(KL_EPS);
                    let b = q.data()[i * k + j].max(KL_EPS);
                    a * (a / b).ln()
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

fn check_pair(real: &Classifier, gen: &Classifier, validation: &ImageSet) -> Result<()> {
    if real.num_classes != gen.num_classes {
        return Err(Error::Invalid(format!("label spaces differ: {} vs {} classes", real.num_classes, gen.num_classes)));
    }
    if let Some(&bad) = validation.labels.iter().find(|&&l| l >= real.num_classes) {
        return Err(Error::Invalid(format!("validation label {bad} outside 0..{}", real.num_classes)));
    }
    if validation.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    Ok(())
}

/// Validation accuracies of a classifier trained on real images and one
/// trained on generated images.
pub fn adversarial_accuracy(real: &Classifier, gen: &Classifier, validation: &ImageSet) -> Result<(f64, f64)> {
    check_pair(real, gen, validation)?;
    Ok((accuracy(&real.predict(&validation.images)?, &validation.labels), accuracy(&gen.predict(&validation.images)?, &validation.labels)))
}

/// Mean `KL(P_real(y|x) ‖ P_gen(y|x))` over the validation images.
pub fn adversarial_divergence(real: &Classifier, gen: &Classifier, validation: &ImageSet) -> Result<f64> {
    check_pair(real, gen, validation)?;
    mean_kl(&real.predict(&validation.images)?, &gen.predict(&validation.images)?)
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per contiguous split; mean and population
/// standard deviation over splits. Zero-probability terms contribute zero.
pub fn score_from_probs(probs: &Tensor<f64>, splits: usize) -> Result<(f64, f64)> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if n == 0 || splits == 0 || splits > n {
        return Err(Error::Invalid(format!("cannot split {n} samples into {splits} parts")));
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            let rows = &probs.data()[lo * k..hi * k];
            let m = (hi - lo) as f64;
            // Mean shifted by the first row: rows equal to it add exact zeros.
            let marginal: Vec<f64> = (0..k)
                .map(|j| {
                    let x0 = rows[j];
                    x0 + rows.iter().skip(j).step_by(k).map(|&x| x - x0).sum::<f64>() / m
                })
                .collect();
            let kl = compensated_sum(
                rows.chunks_exact(k).flat_map(|r| r.iter().zip(&marginal).filter(|(&p, _)| p > 0.0).map(|(&p, &q)| p * (p / q).ln())),
            );
            (kl / m).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

pub fn classifier_score(clf: &Classifier, samples: &Tensor<f32>, splits: usize) -> Result<(f64, f64)> {
    if samples.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("classifier score of an empty batch".into()));
    }
    score_from_probs(&clf.predict(samples)?, splits)
}

/// Flattened last-conv-layer features of the discriminator, `n×d`.
pub fn discriminator_features(disc: &Discriminator, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut out = Vec::new();
    let mut d = 0;
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
        let g = Graph::no_grad();
        let cx = Ctx::new(&g, store, Mode::Eval);
        let f = disc.forward(&cx, g.input(images.select(&idx)))?.features;
        let v = g.value(f);
        d = v.len() / idx.len();
        out.extend_from_slice(v.data());
    }
    Tensor::new(&[n, d], out)
}

/// 1-NN accuracy of `test` against `train` under cosine similarity; ties
/// go to the earliest training row.
pub fn nn_accuracy(train: &Tensor<f32>, train_labels: &[usize], test: &Tensor<f32>, test_labels: &[usize]) -> Result<f64> {
    let (nt, d) = (train.shape()[0], train.shape()[1]);
    let ns = test.shape()[0];
    if nt == 0 || ns == 0 {
        return Err(Error::Invalid("1-NN evaluation needs nonempty sets".into()));
    }
    if test.shape()[1] != d {
        return Err(Error::Dimension { axis: "feature width", expected: d, actual: test.shape()[1] });
    }
    let unit = |t: &Tensor<f32>| -> Vec<f64> {
        t.data()
            .chunks_exact(d)
            .flat_map(|r| {
                let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                r.iter().map(move |&v| v as f64 * inv)
            })
            .collect()
    };
    let (a, b) = (unit(test), unit(train));
    let mut sim = vec![0.0f64; ns * nt];
    f64::gemm(ns, d, nt, 1.0, &a, (d as isize, 1), &b, (1, d as isize), 0.0, &mut sim, (nt as isize, 1));
    let hits = (0..ns)
        .filter(|&i| {
            let row = &sim[i * nt..(i + 1) * nt];
            let best = row.iter().enumerate().fold(0, |b, (j, &s)| if s > row[b] { j } else { b });
            train_labels[best] == test_labels[i]
        })
        .count();
    Ok(hits as f64 / ns as f64)
}

/// Features from `disc` for both sets, then [`nn_accuracy`].
pub fn nn_feature_eval(disc: &Discriminator, store: &ParamStore<f32>, train: &ImageSet, test: &ImageSet) -> Result<f64> {
    let ft = discriminator_features(disc, store, &train.images)?;
    let fs = discriminator_features(disc, store, &test.images)?;
    nn_accuracy(&ft, &train.labels, &fs, &test.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        let k = rows[0].len();
        Tensor::new(&[rows.len(), k], rows.concat()).unwrap()
    }

    #[test]
    fn kl_of_half_against_skewed() {
        let p = probs(&[&[0.5, 0.5]]);
        let q = probs(&[&[0.9, 0.1]]);
        let kl = mean_kl(&p, &q).unwrap();
        assert!((kl - (5.0f64 / 3.0).ln()).abs() < 1e-12, "{kl}");
        assert_eq!(mean_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn marginal_equal_score_is_one() {
        let p = probs(&vec![&[0.2, 0.3, 0.5][..]; 40]);
        assert_eq!(score_from_probs(&p, 4).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn accuracy_counts_top_one() {
        let p = probs(&[&[0.1, 0.9], &[0.6, 0.4], &[0.5, 0.5]]);
        assert!((accuracy(&p, &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nn_self_match_is_perfect() {
        let f = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(nn_accuracy(&f, &[0, 1, 2], &f, &[0, 1, 2]).unwrap(), 1.0);
    }
}

//! Strided convolutional stacks: the discriminator, the conditional encoder
//! and the trunk of the evaluation classifier.

use rand::Rng;

use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Linear, LEAKY_SLOPE};
use crate::tensor::Scalar;

/// `4×4` stride-2 convolutions with leaky ReLU; batch norm on every layer
/// but the first.
#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<(Conv2d, Option<BatchNorm>)>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial size of the last feature map.
    pub out_size: usize,
}

impl ConvStack {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        image_size: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config(format!("{prefix}: at least one convolution is required")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        let mut size = image_size;
        for (i, &w) in widths.iter().enumerate() {
            if size < 2 || !size.is_multiple_of(2) {
                return Err(Error::Config(format!("{prefix}: image size {image_size} does not halve {} times", widths.len())));
            }
            let conv = Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, w, 4, 2, 1, rng)?;
            let bn = if i > 0 { Some(BatchNorm::new(store, &format!("{prefix}.bn{i}"), w, rng)?) } else { None };
            layers.push((conv, bn));
            cin = w;
            size /= 2;
        }
        Ok(Self { layers, in_channels, out_channels: cin, out_size: size })
    }

    /// Last convolutional feature map after its activation.
    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = conv.forward(cx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(cx, h)?;
            }
            h = cx.g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        Ok(h)
    }
}

/// Outputs of one discriminator pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `n×1` probability of being real, strictly inside `(0, 1)`.
    pub prob: Var,
    pub logit: Var,
    /// Last convolutional features, `n×c×h×w`.
    pub features: Var,
}

/// Conv stack, average pool over the final map, linear layer to one logit.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub trunk: ConvStack,
    pub head: Linear,
}

impl Discriminator {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, image_size: usize, channels: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let trunk = ConvStack::new(store, "disc", channels, image_size, widths, rng)?;
        let head = Linear::new(store, "disc.head", trunk.out_channels, 1, true, rng)?;
        Ok(Self { trunk, head })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<DiscOutput> {
        let features = self.trunk.forward(cx, x)?;
        let k = self.trunk.out_size;
        let pooled = cx.g.avg_pool(features, k, k)?;
        let n = cx.g.shape(x)[0];
        let flat = cx.g.reshape(pooled, &[n, self.trunk.out_channels])?;
        let logit = self.head.forward(cx, flat)?;
        let prob = open_unit(cx, cx.g.sigmoid(logit)?)?;
        Ok(DiscOutput { prob, logit, features })
    }
}

/// Clamps a sigmoid output into the open unit interval so rounding can
/// never produce exactly 0 or 1.
pub fn open_unit<S: Scalar>(cx: &Ctx<S>, p: Var) -> Result<Var> {
    let lo = S::min_positive_value();
    let hi = S::one() - S::epsilon() / S::from_f64(2.0);
    cx.g.clamp(p, lo, hi)
}

/// Image encoder for conditional generation: conv stack, global average
/// pool, linear map to the embedding size.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub trunk: ConvStack,
    pub head: Linear,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        image_size: usize,
        channels: usize,
        widths: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = ConvStack::new(store, prefix, channels, image_size, widths, rng)?;
        let head = Linear::new(store, &format!("{prefix}.head"), trunk.out_channels, dim, true, rng)?;
        Ok(Self { trunk, head })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        let f = self.trunk.forward(cx, x)?;
        let k = self.trunk.out_size;
        let n = cx.g.shape(x)[0];
        let pooled = cx.g.reshape(cx.g.avg_pool(f, k, k)?, &[n, self.trunk.out_channels])?;
        self.head.forward(cx, pooled)
    }
}

//! The layered recursive generator.
//!
//! A noise LSTM drives every timestep. Step 0 paints the background; each
//! later step produces a foreground appearance, a soft mask and a pose, warps
//! appearance and mask with the same pose and pastes them over the canvas
//! composed so far.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamStore, Var};
use crate::discriminator::{open_unit, Encoder};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvTranspose2d, Ctx, Linear, LstmCell, Mode, LEAKY_SLOPE};
use crate::stn;
use crate::tensor::{Scalar, Tensor};
use crate::variants::VariantKind;

/// Named dataset configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    MnistOne,
    MnistTwo,
    Cifar10,
    Cub200,
    /// Folder of images; architecture comes entirely from the config file.
    Folder,
}

impl Dataset {
    pub fn name(&self) -> &'static str {
        match self {
            Dataset::MnistOne => "mnist-one",
            Dataset::MnistTwo => "mnist-two",
            Dataset::Cifar10 => "cifar-10",
            Dataset::Cub200 => "cub-200",
            Dataset::Folder => "folder",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mnist-one" => Dataset::MnistOne,
            "mnist-two" => Dataset::MnistTwo,
            "cifar-10" | "cifar10" => Dataset::Cifar10,
            "cub-200" | "cub200" => Dataset::Cub200,
            "folder" => Dataset::Folder,
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        })
    }
}

/// Architecture and composition settings of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dataset: Dataset,
    pub image_size: usize,
    pub channels: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub timesteps: usize,
    pub s_min: f64,
    /// Background generator widths before the RGB output layer.
    pub bg_widths: Vec<usize>,
    /// Foreground trunk widths.
    pub fg_widths: Vec<usize>,
    pub d_widths: Vec<usize>,
    pub variant: VariantKind,
    /// Feed noise through the LSTM; `false` gives the plain DCGAN generator.
    pub use_lstm: bool,
    /// Reconstruction weight for the conditional variant.
    pub lambda_rec: f64,
}

impl ModelConfig {
    pub fn preset(dataset: Dataset) -> Self {
        let base = |image_size, timesteps, s_min, bg: &[usize], fg: &[usize], d: &[usize]| ModelConfig {
            dataset,
            image_size,
            channels: 3,
            z_dim: 100,
            hidden: 100,
            timesteps,
            s_min,
            bg_widths: bg.to_vec(),
            fg_widths: fg.to_vec(),
            d_widths: d.to_vec(),
            variant: VariantKind::Full,
            use_lstm: true,
            lambda_rec: 10.0,
        };
        match dataset {
            Dataset::MnistOne | Dataset::Cifar10 | Dataset::Folder => {
                base(32, 2, 1.2, &[256, 128, 64], &[512, 256, 128], &[64, 128, 256])
            }
            Dataset::MnistTwo => base(64, 3, 2.0, &[256, 128, 64, 32], &[512, 256, 128, 64], &[64, 128, 256, 512]),
            Dataset::Cub200 => base(64, 2, 1.2, &[512, 256, 128, 64], &[1024, 512, 256, 128], &[128, 256, 512, 1024]),
        }
    }

    /// The matching DCGAN: a single generator at foreground width fed by the
    /// noise directly, with the same discriminator.
    pub fn dcgan_baseline(dataset: Dataset) -> Self {
        let mut c = Self::preset(dataset);
        c.timesteps = 1;
        c.use_lstm = false;
        c.bg_widths = c.fg_widths.clone();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.timesteps == 0 {
            return err("timesteps must be at least 1".into());
        }
        if self.z_dim == 0 || self.hidden == 0 || self.channels == 0 {
            return err("z_dim, hidden and channels must be positive".into());
        }
        if self.s_min.is_nan() || self.s_min < 1.0 {
            return err(format!("s_min must be at least 1, got {}", self.s_min));
        }
        for (name, widths) in [("bg_widths", &self.bg_widths), ("fg_widths", &self.fg_widths)] {
            if widths.is_empty() || widths.contains(&0) {
                return err(format!("{name} must list positive channel counts"));
            }
            let produced = 4usize << widths.len();
            if produced != self.image_size {
                return err(format!("{name} {:?} produce {produced}×{produced} images, expected {}", widths, self.image_size));
            }
        }
        if self.d_widths.is_empty() || (self.image_size >> self.d_widths.len()) == 0 {
            return err(format!("d_widths {:?} do not fit image size {}", self.d_widths, self.image_size));
        }
        if !self.use_lstm && self.timesteps > 1 {
            return err("the LSTM can only be disabled for a single timestep".into());
        }
        if self.variant == VariantKind::Conditional && self.timesteps < 2 {
            return err("the conditional variant needs a foreground step".into());
        }
        if self.lambda_rec < 0.0 {
            return err("lambda_rec must be non-negative".into());
        }
        Ok(())
    }

    pub fn has_pose(&self) -> bool {
        self.variant != VariantKind::NoTransform
    }

    pub fn has_mask_head(&self) -> bool {
        self.variant != VariantKind::NoMask
    }
}

/// Recurrent state carried between timesteps.
#[derive(Clone, Copy, Debug)]
pub struct GenState {
    pub h: Var,
    pub c: Var,
    /// Context embedding of the previous foreground, absent before the first.
    pub h_f: Option<Var>,
}

/// Everything one foreground step produced.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// Fused input `y_t`.
    pub y: Var,
    /// Trunk features `s_t`.
    pub s: Var,
    /// Appearance, `n×3×H×W` in `(-1, 1)`.
    pub f: Var,
    /// Mask, `n×1×H×W` in `(0, 1)`; for the no-mask variant the constant ones mask.
    pub m: Var,
    /// Constrained pose `n×6`, absent without transformation.
    pub a: Option<Var>,
    pub f_hat: Var,
    pub m_hat: Var,
    /// Composite after this step.
    pub x: Var,
}

/// Result of a full generation pass.
#[derive(Clone, Debug)]
pub struct Generation {
    pub background: Var,
    pub layers: Vec<LayerOutput>,
}

impl Generation {
    pub fn image(&self) -> Var {
        self.layers.last().map_or(self.background, |l| l.x)
    }
}

/// Transposed-convolution decoder from a vector to an image-sized map.
#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<(ConvTranspose2d, BatchNorm)>,
}

impl Decoder {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, input: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = input;
        for (i, &w) in widths.iter().enumerate() {
            let (stride, pad) = if i == 0 { (1, 0) } else { (2, 1) };
            let conv = ConvTranspose2d::new(store, &format!("{prefix}.deconv{i}"), cin, w, 4, stride, pad, rng)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.bn{i}"), w, rng)?;
            layers.push((conv, bn));
            cin = w;
        }
        Ok(Self { layers })
    }

    fn forward<S: Scalar>(&self, cx: &Ctx<S>, v: Var) -> Result<Var> {
        let shape = cx.g.shape(v);
        let mut h = cx.g.reshape(v, &[shape[0], shape[1], 1, 1])?;
        for (conv, bn) in &self.layers {
            h = cx.g.relu(bn.forward(cx, conv.forward(cx, h)?)?)?;
        }
        Ok(h)
    }
}

/// Generator parameters and structure.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    lstm: Option<LstmCell>,
    background: Decoder,
    background_out: ConvTranspose2d,
    trunk: Option<Decoder>,
    appearance: Option<ConvTranspose2d>,
    mask: Option<ConvTranspose2d>,
    pose: Option<Linear>,
    context: Option<Linear>,
    fuse: Option<Linear>,
    encoder: Option<Encoder>,
}

impl Generator {
    pub fn new<S: Scalar, R: Rng>(config: ModelConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let lstm = if c.use_lstm { Some(LstmCell::new(store, "gen.lstm", c.z_dim, c.hidden, rng)?) } else { None };
        let bg_in = if c.use_lstm { c.hidden } else { c.z_dim };
        let background = Decoder::new(store, "gen.bg", bg_in, &c.bg_widths, rng)?;
        let background_out = ConvTranspose2d::new(store, "gen.bg.out", *c.bg_widths.last().unwrap(), c.channels, 4, 2, 1, rng)?;
        let has_fg = c.timesteps > 1;
        let trunk_w = *c.fg_widths.last().unwrap();
        let trunk = if has_fg { Some(Decoder::new(store, "gen.fg.trunk", c.hidden, &c.fg_widths, rng)?) } else { None };
        let appearance =
            if has_fg { Some(ConvTranspose2d::new(store, "gen.fg.appearance", trunk_w, c.channels, 4, 2, 1, rng)?) } else { None };
        let mask = if has_fg && c.has_mask_head() {
            Some(ConvTranspose2d::new(store, "gen.fg.mask", trunk_w, 1, 4, 2, 1, rng)?)
        } else {
            None
        };
        let pose = if has_fg && c.has_pose() { Some(Linear::new(store, "gen.fg.pose", c.hidden, 6, true, rng)?) } else { None };
        let recurrent_fg = c.timesteps > 2;
        let context = if recurrent_fg { Some(Linear::new(store, "gen.fg.context", trunk_w, c.hidden, true, rng)?) } else { None };
        let fuse = if recurrent_fg { Some(Linear::new(store, "gen.fg.fuse", 2 * c.hidden, c.hidden, true, rng)?) } else { None };
        let encoder = if c.variant == VariantKind::Conditional {
            Some(Encoder::new(store, "gen.encoder", c.image_size, c.channels, &c.d_widths, c.z_dim, rng)?)
        } else {
            None
        };
        Ok(Self { config, lstm, background, background_out, trunk, appearance, mask, pose, context, fuse, encoder })
    }

    /// Standard normal noise for every timestep, each `n×z_dim`.
    pub fn sample_noise<S: Scalar, R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Tensor<S>> {
        (0..self.config.timesteps)
            .map(|_| Tensor::from_fn(&[n, self.config.z_dim], |_| S::from_f64(rng.sample(StandardNormal))))
            .collect()
    }

    fn zeros<S: Scalar>(&self, cx: &Ctx<S>, n: usize) -> Var {
        cx.g.input(Tensor::zeros(&[n, self.config.hidden]))
    }

    /// Paints the background from `z0` and returns it with the new state.
    pub fn background_step<S: Scalar>(&self, cx: &Ctx<S>, z0: Var) -> Result<(Var, GenState)> {
        let zs = cx.g.shape(z0);
        if zs.len() != 2 || zs[1] != self.config.z_dim {
            return Err(Error::Dimension { axis: "noise width", expected: self.config.z_dim, actual: *zs.last().unwrap_or(&0) });
        }
        let n = zs[0];
        let (code, state) = match &self.lstm {
            Some(lstm) => {
                let zero = self.zeros(cx, n);
                let (h, c) = lstm.forward(cx, z0, zero, zero)?;
                (h, GenState { h, c, h_f: None })
            }
            None => {
                let zero = self.zeros(cx, n);
                (z0, GenState { h: zero, c: zero, h_f: None })
            }
        };
        let feat = self.background.forward(cx, code)?;
        let x0 = cx.g.tanh(self.background_out.forward(cx, feat)?)?;
        Ok((x0, state))
    }

    /// Foreground step `t ≥ 1` on top of `x_prev`.
    pub fn foreground_step<S: Scalar>(
        &self,
        cx: &Ctx<S>,
        t: usize,
        z: Var,
        state: Option<&mut GenState>,
        x_prev: Var,
    ) -> Result<LayerOutput> {
        let state = state.ok_or_else(|| Error::State("foreground step before the background step".into()))?;
        let (Some(lstm), Some(trunk), Some(appearance)) = (&self.lstm, &self.trunk, &self.appearance) else {
            return Err(Error::State("this model has no foreground generator".into()));
        };
        if t == 0 || t >= self.config.timesteps {
            return Err(Error::State(format!("foreground step {t} outside 1..{}", self.config.timesteps)));
        }
        let g = cx.g;
        let (h, c) = lstm.forward(cx, z, state.h, state.c)?;
        state.h = h;
        state.c = c;
        let y = match (state.h_f, &self.fuse) {
            (Some(h_f), Some(fuse)) => g.leaky_relu(fuse.forward(cx, g.concat_cols(&[h, h_f])?)?, LEAKY_SLOPE)?,
            _ => h,
        };
        let s = trunk.forward(cx, y)?;
        let f = g.tanh(appearance.forward(cx, s)?)?;
        let n = g.shape(f)[0];
        let size = self.config.image_size;
        let m = match &self.mask {
            Some(head) => open_unit(cx, g.sigmoid(head.forward(cx, s)?)?)?,
            None => g.input(Tensor::full(&[n, 1, size, size], S::one())),
        };
        let (a, f_hat, m_hat) = match &self.pose {
            Some(pose) => {
                let a = g.constrain_pose(pose.forward(cx, y)?, self.config.s_min)?;
                let warped = stn::transform_many(g, &[f, m], a)?;
                let m_hat = if self.mask.is_some() { warped[1] } else { hard_mask(cx, warped[1])? };
                (Some(a), warped[0], m_hat)
            }
            None => (None, f, m),
        };
        let x = g.blend(m_hat, f_hat, x_prev)?;
        if t + 1 < self.config.timesteps {
            if let Some(context) = &self.context {
                let k = g.shape(s)[2];
                let pooled = g.reshape(g.avg_pool(s, k, k)?, &[n, g.shape(s)[1]])?;
                state.h_f = Some(context.forward(cx, pooled)?);
            }
        }
        Ok(LayerOutput { y, s, f, m, a, f_hat, m_hat, x })
    }

    /// Runs the background and every foreground step. `z` holds one noise
    /// tensor per timestep.
    pub fn generate<S: Scalar>(&self, cx: &Ctx<S>, z: &[Var]) -> Result<Generation> {
        if z.len() != self.config.timesteps {
            return Err(Error::Invalid(format!("expected {} noise tensors, got {}", self.config.timesteps, z.len())));
        }
        let (background, mut state) = self.background_step(cx, z[0])?;
        let mut layers = Vec::with_capacity(z.len() - 1);
        let mut x = background;
        for (t, &zt) in z.iter().enumerate().skip(1) {
            let out = self.foreground_step(cx, t, zt, Some(&mut state), x)?;
            x = out.x;
            layers.push(out);
        }
        Ok(Generation { background, layers })
    }

    /// Conditional reconstruction of `x_input`: the image embedding replaces
    /// the background noise and the embedding of the residual against the
    /// canvas so far replaces each foreground noise.
    pub fn reconstruct<S: Scalar>(&self, cx: &Ctx<S>, x_input: Var) -> Result<Generation> {
        let encoder = self.encoder.as_ref().ok_or_else(|| Error::State("model has no encoder".into()))?;
        let z0 = encoder.forward(cx, x_input)?;
        let (background, mut state) = self.background_step(cx, z0)?;
        let mut layers = Vec::new();
        let mut x = background;
        for t in 1..self.config.timesteps {
            let residual = cx.g.sub(x_input, x)?;
            let zt = encoder.forward(cx, residual)?;
            let out = self.foreground_step(cx, t, zt, Some(&mut state), x)?;
            x = out.x;
            layers.push(out);
        }
        Ok(Generation { background, layers })
    }

    pub fn encode<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Result<Var> {
        self.encoder.as_ref().ok_or_else(|| Error::State("model has no encoder".into()))?.forward(cx, x)
    }
}

/// Concrete tensors of one foreground step.
#[derive(Clone, Debug)]
pub struct LayerValues<S = f32> {
    pub f: Tensor<S>,
    pub m: Tensor<S>,
    pub a: Option<Tensor<S>>,
    pub f_hat: Tensor<S>,
    pub m_hat: Tensor<S>,
    pub x: Tensor<S>,
}

/// Concrete tensors of a whole generation pass.
#[derive(Clone, Debug)]
pub struct GenerationValues<S = f32> {
    pub background: Tensor<S>,
    pub layers: Vec<LayerValues<S>>,
}

impl<S: Scalar> GenerationValues<S> {
    pub fn image(&self) -> &Tensor<S> {
        self.layers.last().map_or(&self.background, |l| &l.x)
    }

    pub fn read(g: &crate::autodiff::Graph<S>, gen: &Generation) -> Self {
        let t = |v: Var| (*g.value(v)).clone();
        Self {
            background: t(gen.background),
            layers: gen
                .layers
                .iter()
                .map(|l| LayerValues { f: t(l.f), m: t(l.m), a: l.a.map(t), f_hat: t(l.f_hat), m_hat: t(l.m_hat), x: t(l.x) })
                .collect(),
        }
    }
}

impl Generator {
    /// Draws `n` samples without recording gradients. `mode` picks batch or
    /// running normalization statistics; running statistics are never updated.
    pub fn sample<S: Scalar, R: Rng>(&self, store: &ParamStore<S>, n: usize, mode: Mode, rng: &mut R) -> Result<GenerationValues<S>> {
        let mode = if mode == Mode::Train { Mode::Sample } else { mode };
        let g = crate::autodiff::Graph::no_grad();
        let cx = Ctx::new(&g, store, mode);
        let z: Vec<Var> = self.sample_noise(n, rng).into_iter().map(|t| g.input(t)).collect();
        let out = self.generate(&cx, &z)?;
        Ok(GenerationValues::read(&g, &out))
    }

    /// Conditional reconstruction of concrete images without gradients.
    pub fn reconstruct_values<S: Scalar>(&self, store: &ParamStore<S>, images: &Tensor<S>, mode: Mode) -> Result<GenerationValues<S>> {
        let mode = if mode == Mode::Train { Mode::Sample } else { mode };
        let g = crate::autodiff::Graph::no_grad();
        let cx = Ctx::new(&g, store, mode);
        let out = self.reconstruct(&cx, g.input(images.clone()))?;
        Ok(GenerationValues::read(&g, &out))
    }
}

/// `1` where the warped support is at least one half, else `0`; a constant
/// so the paste is a pure selection.
fn hard_mask<S: Scalar>(cx: &Ctx<S>, warped: Var) -> Result<Var> {
    let half = S::from_f64(0.5);
    let v = cx.g.value(warped).map(|p| if p >= half { S::one() } else { S::zero() });
    Ok(cx.g.input(v))
}

//! MNIST-ONE and MNIST-TWO: transformed digits on uniform gray canvases.
//!
//! Every sample is a pure function of `(seed, index)`, so any subset can be
//! regenerated independently and in any order.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::idx::DigitSource;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layout of one synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthLayout {
    pub canvas: usize,
    pub output: usize,
    pub digits: usize,
}

pub const MNIST_ONE: SynthLayout = SynthLayout { canvas: 48, output: 32, digits: 1 };
pub const MNIST_TWO: SynthLayout = SynthLayout { canvas: 78, output: 64, digits: 2 };

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const ROTATION_RANGE: (f64, f64) = (-FRAC_PI_4, FRAC_PI_4);
pub const GRAY_RANGE: (f32, f32) = (0.0, 200.0);

impl SynthLayout {
    /// Inclusive canvas column range digit `k` may occupy. With two digits
    /// the canvas is split into halves separated by a one-column gutter.
    pub fn column_region(&self, k: usize) -> (usize, usize) {
        match (self.digits, k) {
            (1, _) => (0, self.canvas - 1),
            (_, 0) => (0, self.canvas / 2 - 1),
            _ => (self.canvas / 2 + 1, self.canvas - 1),
        }
    }
}

/// Ground truth for one pasted digit.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub label: u8,
    /// `(u·cosθ, −u·sinθ, c_x, u·sinθ, u·cosθ, c_y)`: digit scale `u`,
    /// rotation `θ` and the digit centre in normalized canvas coordinates.
    pub pose: [f32; 6],
    /// Digit support resized to the output size, values in `[0, 1]`.
    pub mask: Vec<f32>,
}

impl SynthObject {
    pub fn scale(&self) -> f64 {
        (self.pose[0] as f64).hypot(self.pose[3] as f64)
    }

    pub fn rotation(&self) -> f64 {
        (self.pose[3] as f64).atan2(self.pose[0] as f64)
    }
}

/// One synthesized image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `3×H×W` in `[-1, 1]`, gray replicated over channels.
    pub image: Tensor<f32>,
    pub objects: Vec<SynthObject>,
    /// Background level on the 8-bit scale.
    pub bg_gray: f32,
}

impl SynthSample {
    /// Union of the object masks.
    pub fn gt_mask(&self) -> Vec<f32> {
        let n = self.image.len() / 3;
        let mut m = vec![0.0f32; n];
        for o in &self.objects {
            m.iter_mut().zip(&o.mask).for_each(|(a, &b)| *a = a.max(b));
        }
        m
    }

    /// Background value in image units.
    pub fn bg_value(&self) -> f32 {
        to_unit(self.bg_gray as f64)
    }
}

fn to_unit(v: f64) -> f32 {
    (v / 127.5 - 1.0) as f32
}

/// Placement of one digit before rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub digit: usize,
    pub scale: f64,
    pub rotation: f64,
    /// Digit centre in canvas pixel coordinates `(x, y)`.
    pub center: (f64, f64),
}

/// A rendered full-resolution canvas.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub size: usize,
    pub pixels: Vec<f64>,
    /// Per digit, 1 where the digit has nonzero coverage.
    pub supports: Vec<Vec<f64>>,
}

/// Stream seed for sample `index`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

fn digit_value(src: &DigitSource, digit: usize, x: f64, y: f64) -> f64 {
    // Bilinear over pixel centres with zeros outside.
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let img = src.image(digit);
    let at = |cx: f64, cy: f64| -> f64 {
        if cx < 0.0 || cy < 0.0 || cx >= src.cols as f64 || cy >= src.rows as f64 {
            0.0
        } else {
            img[cy as usize * src.cols + cx as usize] as f64 / 255.0
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bot = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Canvas offsets (relative to the centre) that can receive coverage from
/// the transformed digit: `(min_x, max_x, min_y, max_y)`.
fn support_extent(src: &DigitSource, digit: usize, scale: f64, rotation: f64) -> (f64, f64, f64, f64) {
    let (cy, cx) = ((src.rows as f64 - 1.0) / 2.0, (src.cols as f64 - 1.0) / 2.0);
    let (s, c) = rotation.sin_cos();
    let mut ext = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let img = src.image(digit);
    for i in 0..src.rows {
        for j in 0..src.cols {
            if img[i * src.cols + j] == 0 {
                continue;
            }
            for (dx, dy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let (qx, qy) = (j as f64 + dx - cx, i as f64 + dy - cy);
                let px = scale * (c * qx - s * qy);
                let py = scale * (s * qx + c * qy);
                ext = (ext.0.min(px), ext.1.max(px), ext.2.min(py), ext.3.max(py));
            }
        }
    }
    if ext.0 > ext.1 {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        ext
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        (lo + hi) / 2.0
    }
}

/// Draws a digit placement whose coverage stays inside `columns` and the
/// canvas rows (centred when it cannot fit).
fn place(rng: &mut ChaCha8Rng, src: &DigitSource, size: usize, columns: (usize, usize)) -> Placement {
    let digit = rng.random_range(0..src.len());
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let rotation = rng.random_range(ROTATION_RANGE.0..=ROTATION_RANGE.1);
    let (x0, x1, y0, y1) = support_extent(src, digit, scale, rotation);
    let (lo, hi) = (columns.0 as f64, columns.1 as f64);
    let cx = uniform_in(rng, lo - x0, hi - x1);
    let cy = uniform_in(rng, -y0, (size - 1) as f64 - y1);
    Placement { digit, scale, rotation, center: (cx, cy) }
}

/// Renders placements onto a `size×size` canvas of level `gray`; digit `k`
/// only touches columns in `regions[k]`.
pub fn render_canvas(src: &DigitSource, size: usize, gray: f64, placements: &[Placement], regions: &[(usize, usize)]) -> Canvas {
    let mut pixels = vec![gray; size * size];
    let mut supports = Vec::with_capacity(placements.len());
    let (dcy, dcx) = ((src.rows as f64 - 1.0) / 2.0, (src.cols as f64 - 1.0) / 2.0);
    for (p, &(c0, c1)) in placements.iter().zip(regions) {
        let mut support = vec![0.0; size * size];
        let (s, c) = p.rotation.sin_cos();
        for y in 0..size {
            for x in c0..=c1.min(size - 1) {
                let (ox, oy) = ((x as f64 - p.center.0) / p.scale, (y as f64 - p.center.1) / p.scale);
                let qx = c * ox + s * oy + dcx;
                let qy = -s * ox + c * oy + dcy;
                let alpha = digit_value(src, p.digit, qx, qy);
                if alpha > 0.0 {
                    let k = y * size + x;
                    pixels[k] += alpha * (255.0 - pixels[k]);
                    support[k] = 1.0;
                }
            }
        }
        supports.push(support);
    }
    Canvas { size, pixels, supports }
}

/// Align-corners bilinear resize of a square single-channel image, written
/// in lerp form so that uniform neighbourhoods are reproduced exactly.
pub fn resize_bilinear(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let ratio = if to > 1 { (from - 1) as f64 / (to - 1) as f64 } else { 0.0 };
    let taps: Vec<(usize, usize, f64)> = (0..to)
        .map(|i| {
            let u = i as f64 * ratio;
            let i0 = (u.floor() as usize).min(from - 1);
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect();
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let mut out = vec![0.0; to * to];
    for (y, &(y0, y1, ty)) in taps.iter().enumerate() {
        for (x, &(x0, x1, tx)) in taps.iter().enumerate() {
            let top = lerp(src[y0 * from + x0], src[y0 * from + x1], tx);
            let bot = lerp(src[y1 * from + x0], src[y1 * from + x1], tx);
            out[y * to + x] = lerp(top, bot, ty);
        }
    }
    out
}

/// Gray level and placements of sample `index`.
pub fn draw_layout(src: &DigitSource, layout: SynthLayout, seed: u64, index: u64) -> (f32, Vec<Placement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let gray: f32 = rng.random_range(GRAY_RANGE.0..=GRAY_RANGE.1);
    let placements = (0..layout.digits).map(|k| place(&mut rng, src, layout.canvas, layout.column_region(k))).collect();
    (gray, placements)
}

/// Builds sample `index` of a dataset.
pub fn synth_sample(src: &DigitSource, layout: SynthLayout, seed: u64, index: u64) -> Result<SynthSample> {
    if src.is_empty() {
        return Err(Error::Invalid("digit source is empty".into()));
    }
    let (gray, placements) = draw_layout(src, layout, seed, index);
    Ok(compose_sample(src, layout, gray, &placements))
}

/// Renders explicit placements; exposed for controlled experiments.
pub fn compose_sample(src: &DigitSource, layout: SynthLayout, gray: f32, placements: &[Placement]) -> SynthSample {
    let regions: Vec<_> = (0..placements.len()).map(|k| layout.column_region(k)).collect();
    let canvas = render_canvas(src, layout.canvas, gray as f64, placements, &regions);
    let small = resize_bilinear(&canvas.pixels, layout.canvas, layout.output);
    let plane: Vec<f32> = small.iter().map(|&v| to_unit(v)).collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    let norm = |v: f64| (2.0 * v / (layout.canvas - 1) as f64 - 1.0) as f32;
    let objects = placements
        .iter()
        .zip(&canvas.supports)
        .map(|(p, sup)| {
            let (s, c) = p.rotation.sin_cos();
            let u = p.scale;
            SynthObject {
                label: src.label(p.digit),
                pose: [(u * c) as f32, (-u * s) as f32, norm(p.center.0), (u * s) as f32, (u * c) as f32, norm(p.center.1)],
                mask: resize_bilinear(sup, layout.canvas, layout.output).into_iter().map(|v| v as f32).collect(),
            }
        })
        .collect();
    SynthSample {
        image: Tensor::new(&[3, layout.output, layout.output], data).expect("image shape"),
        objects,
        bg_gray: gray,
    }
}

/// Samples `0..n` of MNIST-ONE.
pub fn synth_mnist_one(src: &DigitSource, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    synth_range(src, MNIST_ONE, n, seed)
}

/// Samples `0..n` of MNIST-TWO.
pub fn synth_mnist_two(src: &DigitSource, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    synth_range(src, MNIST_TWO, n, seed)
}

pub(crate) fn synth_range(src: &DigitSource, layout: SynthLayout, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    (0..n as u64).map(|i| synth_sample(src, layout, seed, i)).collect()
}

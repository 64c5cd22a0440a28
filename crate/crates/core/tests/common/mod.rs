//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use lrgan::config::TrainConfig;
use lrgan::generator::{Dataset, ModelConfig};
use lrgan::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Directory with the bundled IDX digit files.
pub fn digits_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// An 8×8 model small enough for hundreds of steps in a test.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        z_dim: 6,
        hidden: 6,
        bg_widths: vec![6],
        fg_widths: vec![8],
        d_widths: vec![6, 8],
        ..ModelConfig::preset(Dataset::MnistOne)
    }
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(tiny_model());
    c.batch_size = 4;
    c.seed = seed;
    c
}

/// Smooth random images in `[-1, 1]`.
pub fn toy_images(n: usize, c: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(&[n, c, size, size], |_| r.random_range(-0.9f32..0.9))
}

/// Two-sample-free Kolmogorov–Smirnov statistic of `xs` against the uniform
/// distribution on `[lo, hi]`.
pub fn ks_uniform(xs: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().map(|&x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &f)| {
            let f = f.clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Direct convolution, `x: n×c×h×w`, `w: o×c×k×k`, zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, c2, k, k2] = w.shape().try_into().unwrap();
    assert_eq!((c, k), (c2, k2));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += xd[((b * c + ic) * h + y as usize) * wd + xx as usize] * wdat[((oc * c + ic) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum assignment cost by enumerating every permutation.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    if n == 0 {
        0.0
    } else {
        best
    }
}

/// Bilinear sample of one channel at normalized `(u, v)` with the
/// corner-aligned convention; zero outside.
pub fn bilinear_reference(img: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let x = (u + 1.0) / 2.0 * (w as f64 - 1.0);
    let y = (v + 1.0) / 2.0 * (h as f64 - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let mut s = 0.0;
    for (yy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        for (xx, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            if xx >= 0.0 && yy >= 0.0 && (xx as usize) < w && (yy as usize) < h {
                s += wy * wx * img[yy as usize * w + xx as usize];
            }
        }
    }
    s
}

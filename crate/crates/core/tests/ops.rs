//! Differentiable operators against direct reference computations.

mod common;

use common::*;
use lrgan::autodiff::kernels::{conv_transpose2d_forward, ConvGeom};
use lrgan::autodiff::{blend_pixels, Graph};
use lrgan::stn::{grid_generate, normalized_coord, sample_bilinear, st, AffineParams};
use lrgan::Tensor;
use rand::Rng;

#[test]
fn conv2d_matches_direct_convolution() {
    let mut r = rng(7);
    for (stride, pad, k, size) in [(1, 0, 3, 5), (2, 1, 4, 8), (1, 1, 3, 6), (2, 0, 2, 7)] {
        let x = uniform(&mut r, &[2, 3, size, size], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, k, k], -1.0, 1.0);
        let g = Graph::<f64>::new();
        let y = g.conv2d(g.input(x.clone()), g.input(w.clone()), stride, pad).unwrap();
        let want = naive_conv2d(&x, &w, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

/// `<conv(x), y> = <x, convᵀ(y)>` where the transposed convolution shares
/// the weights; checked on the graph ops so both directions are covered.
#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let mut r = rng(11);
    for case in 0..100 {
        let k = r.random_range(1..=4usize);
        let stride = r.random_range(1..=2usize);
        let pad = r.random_range(0..k.div_ceil(2));
        let cin = r.random_range(1..=3usize);
        let cout = r.random_range(1..=3usize);
        let n = r.random_range(1..=2usize);
        // Pick the output size first so the transposed conv lands exactly on `h`.
        let ho = r.random_range(2..=5usize);
        let h = (ho - 1) * stride + k - 2 * pad;
        let x = uniform(&mut r, &[n, cin, h, h], -1.0, 1.0);
        let w = uniform(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let y = uniform(&mut r, &[n, cout, ho, ho], -1.0, 1.0);
        let g = Graph::<f64>::new();
        let conv = g.conv2d(g.input(x.clone()), g.input(w.clone()), stride, pad).unwrap();
        // conv_transpose2d takes weights laid out `cin_of_input × cout × k × k`,
        // which for the adjoint is exactly `w` read as `cout × cin × k × k`.
        let tconv = g.conv_transpose2d(g.input(y.clone()), g.input(w.clone()), stride, pad).unwrap();
        assert_eq!(g.shape(tconv), x.shape(), "case {case}");
        let lhs = dot(g.value(conv).data(), y.data());
        let rhs = dot(x.data(), g.value(tconv).data());
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-5, "case {case}: {lhs} vs {rhs}");
    }
}

#[test]
fn transposed_conv_kernel_matches_scatter() {
    let mut r = rng(3);
    let (n, cin, cout, h, k, stride, pad) = (1, 2, 3, 3, 4, 2, 1);
    let x = uniform(&mut r, &[n, cin, h, h], -1.0, 1.0);
    let w = uniform(&mut r, &[cin, cout, k, k], -1.0, 1.0);
    let ho = (h - 1) * stride + k - 2 * pad;
    let geom = ConvGeom { n, c: cout, h: ho, w: ho, k, stride, pad, ho: h, wo: h };
    let got = conv_transpose2d_forward(x.data(), w.data(), cin, &geom);
    let mut want = vec![0.0; n * cout * ho * ho];
    for ic in 0..cin {
        for i in 0..h {
            for j in 0..h {
                let v = x.data()[(ic * h + i) * h + j];
                for oc in 0..cout {
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < ho && (xx as usize) < ho {
                                want[(oc * ho + y as usize) * ho + xx as usize] += v * w.data()[((ic * cout + oc) * k + di) * k + dj];
                            }
                        }
                    }
                }
            }
        }
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn st_identity_reproduces_input() {
    let mut r = rng(5);
    for size in [1, 2, 5, 8, 32] {
        let x = uniform(&mut r, &[2, 3, size, size], -1.0, 1.0).cast::<f32>();
        let y = st(&x, &AffineParams::identity(2)).unwrap();
        let err = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6, "size {size}: {err}");
    }
}

#[test]
fn samples_outside_the_extent_are_exactly_zero() {
    let x = Tensor::full(&[1, 1, 6, 6], 3.0f64);
    // Translate far right: every output pixel reads beyond the source.
    let a = AffineParams::from_rows(&[[1.0, 0.0, 5.0, 0.0, 1.0, 0.0]]);
    assert!(st(&x, &a).unwrap().data().iter().all(|&v| v == 0.0));
    // Zoom out by 3: the border ring of the output lies outside.
    let a = AffineParams::from_rows(&[[3.0, 0.0, 0.0, 0.0, 3.0, 0.0]]);
    let y = st(&x, &a).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert_eq!(y.data()[35], 0.0);
}

#[test]
fn sampler_matches_reference_bilinear() {
    let mut r = rng(21);
    let (h, w) = (7, 9);
    let x = uniform(&mut r, &[1, 1, h, w], -1.0, 1.0);
    for _ in 0..20 {
        let row = [r.random_range(0.5..1.5), r.random_range(-0.4..0.4), r.random_range(-0.5..0.5), r.random_range(-0.4..0.4), r.random_range(0.5..1.5), r.random_range(-0.5..0.5)];
        let a = AffineParams::from_rows(&[row]);
        let grid = grid_generate(&a, 5, 6).unwrap();
        let y = sample_bilinear(&x, &grid).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let (u, v) = (normalized_coord::<f64>(j, 6), normalized_coord::<f64>(i, 5));
                let (gu, gv) = (row[0] * u + row[1] * v + row[2], row[3] * u + row[4] * v + row[5]);
                let (su, sv) = grid.at(0, i, j);
                assert!((su - gu).abs() < 1e-12 && (sv - gv).abs() < 1e-12);
                let want = bilinear_reference(x.data(), h, w, gu, gv);
                assert!((y.data()[i * 6 + j] - want).abs() < 1e-9, "({i},{j}) {} vs {want}", y.data()[i * 6 + j]);
            }
        }
    }
}

#[test]
fn blend_recomputation_is_bit_identical() {
    let mut r = rng(9);
    let (n, c, p) = (3, 3, 16);
    let m = Tensor::from_fn(&[n, 1, 4, 4], |_| r.random_range(0.0f32..1.0));
    let f = Tensor::from_fn(&[n, c, 4, 4], |_| r.random_range(-1.0f32..1.0));
    let prev = Tensor::from_fn(&[n, c, 4, 4], |_| r.random_range(-1.0f32..1.0));
    let g = Graph::<f32>::new();
    let x = g.blend(g.input(m.clone()), g.input(f.clone()), g.input(prev.clone())).unwrap();
    let out = g.value(x);
    for b in 0..n {
        for ch in 0..c {
            for q in 0..p {
                let i = (b * c + ch) * p + q;
                let mv = m.data()[b * p + q];
                assert_eq!(out.data()[i], mv * f.data()[i] + (1.0 - mv) * prev.data()[i]);
            }
        }
    }
    assert_eq!(out.data(), blend_pixels(m.data(), f.data(), prev.data(), n, p).as_slice());

    let zeros = Tensor::zeros(&[n, 1, 4, 4]);
    let ones = Tensor::full(&[n, 1, 4, 4], 1.0f32);
    let g = Graph::<f32>::new();
    let x0 = g.blend(g.input(zeros), g.input(f.clone()), g.input(prev.clone())).unwrap();
    let x1 = g.blend(g.input(ones), g.input(f.clone()), g.input(prev.clone())).unwrap();
    assert_eq!(g.value(x0).data(), prev.data());
    assert_eq!(g.value(x1).data(), f.data());
}

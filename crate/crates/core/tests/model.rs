//! Generator structure: parameter budgets, compositing, weight sharing,
//! gradient flow and the ablated builds.

mod common;

use common::*;
use lrgan::discriminator::Discriminator;
use lrgan::generator::{Dataset, Generator, ModelConfig};
use lrgan::nn::{Ctx, Mode};
use lrgan::variants::{build_variant, VariantKind, VariantSpec};
use lrgan::{Graph, ParamStore};

fn counts(model: &ModelConfig) -> (usize, usize) {
    let mut gs = ParamStore::<f32>::new();
    let mut ds = ParamStore::<f32>::new();
    Generator::new(model.clone(), &mut gs, &mut rng(0)).unwrap();
    Discriminator::new(&mut ds, model.image_size, model.channels, &model.d_widths, &mut rng(0)).unwrap();
    (gs.num_parameters(), ds.num_parameters())
}

/// Layer-by-layer tally: 4×4 kernels without bias before batch norm
/// (scale and shift per channel), biased output layers.
fn formula(m: &ModelConfig) -> usize {
    let deconvs = |input: usize, widths: &[usize]| {
        let mut cin = input;
        let mut total = 0;
        for &w in widths {
            total += cin * w * 16 + 2 * w;
            cin = w;
        }
        total
    };
    let (z, h, ch) = (m.z_dim, m.hidden, m.channels);
    let lstm = if m.use_lstm { 4 * h * (z + h) + 4 * h } else { 0 };
    let bg_in = if m.use_lstm { h } else { z };
    let bg = deconvs(bg_in, &m.bg_widths) + m.bg_widths.last().unwrap() * ch * 16;
    let fg = if m.timesteps > 1 {
        let last = *m.fg_widths.last().unwrap();
        let mut t = deconvs(h, &m.fg_widths) + last * ch * 16;
        if m.has_mask_head() {
            t += last * 16;
        }
        if m.has_pose() {
            t += h * 6 + 6;
        }
        if m.timesteps > 2 {
            t += last * h + h + 2 * h * h + h;
        }
        t
    } else {
        0
    };
    let mut disc = 0;
    let mut cin = ch;
    for (i, &w) in m.d_widths.iter().enumerate() {
        disc += cin * w * 16 + if i == 0 { 0 } else { 2 * w };
        cin = w;
    }
    disc += cin + 1;
    lstm + bg + fg + disc
}

#[test]
fn parameter_counts_match_the_layer_tally() {
    for d in [Dataset::MnistOne, Dataset::MnistTwo, Dataset::Cifar10, Dataset::Cub200] {
        for m in [ModelConfig::preset(d), ModelConfig::dcgan_baseline(d)] {
            let (g, dn) = counts(&m);
            assert_eq!(g + dn, formula(&m), "{d} T={}", m.timesteps);
        }
    }
}

#[test]
fn mnist_one_budgets_are_within_two_percent() {
    let (g, d) = counts(&ModelConfig::preset(Dataset::MnistOne));
    let full = (g + d) as f64;
    assert!((full / 5.25e6 - 1.0).abs() < 0.02, "full model has {full}");
    let (g, d) = counts(&ModelConfig::dcgan_baseline(Dataset::MnistOne));
    let base = (g + d) as f64;
    assert!((base / 4.11e6 - 1.0).abs() < 0.02, "baseline has {base}");
}

fn build(model: ModelConfig) -> (Generator, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let gen = Generator::new(model, &mut store, &mut rng(1)).unwrap();
    (gen, store)
}

fn noise(g: &Graph<f64>, gen: &Generator, n: usize, seed: u64) -> Vec<lrgan::Var> {
    gen.sample_noise::<f64, _>(n, &mut rng(seed)).into_iter().map(|t| g.input(t)).collect()
}

#[test]
fn composites_are_reproducible_from_stored_layers() {
    let model = ModelConfig { timesteps: 3, ..tiny_model() };
    let (gen, store) = build(model);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store, Mode::Sample);
    let out = gen.generate(&cx, &noise(&g, &gen, 3, 2)).unwrap();
    assert_eq!(out.layers.len(), 2);
    let mut prev = g.value(out.background);
    for l in &out.layers {
        let (m, f, x) = (g.value(l.m_hat), g.value(l.f_hat), g.value(l.x));
        let plane = 64;
        for (i, &xv) in x.data().iter().enumerate() {
            let (b, q) = (i / (3 * plane), i % plane);
            let mv = m.data()[b * plane + q];
            assert_eq!(xv, mv * f.data()[i] + (1.0 - mv) * prev.data()[i]);
        }
        assert!(g.value(l.m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prev = x;
    }
}

#[test]
fn single_timestep_image_is_the_background() {
    let model = ModelConfig { timesteps: 1, ..tiny_model() };
    let (gen, store) = build(model);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store, Mode::Sample);
    let out = gen.generate(&cx, &noise(&g, &gen, 2, 0)).unwrap();
    assert!(out.layers.is_empty());
    assert_eq!(out.image(), out.background);
}

#[test]
fn foreground_steps_share_parameters() {
    let model = ModelConfig { timesteps: 3, ..tiny_model() };
    let (gen, store) = build(model);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store, Mode::Sample);
    gen.generate(&cx, &noise(&g, &gen, 2, 0)).unwrap();
    // Each parameter enters the graph once however many steps use it.
    assert_eq!(g.param_leaf_count(), store.params().len());
    let names: Vec<_> = store.params().iter().map(|p| p.name.as_str()).collect();
    assert!(!names.iter().any(|n| n.contains("step1") || n.contains("step2")));
}

#[test]
fn background_noise_receives_gradient_through_the_composite() {
    let model = ModelConfig { timesteps: 3, ..tiny_model() };
    let (gen, store) = build(model);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store, Mode::Sample);
    let z: Vec<_> = gen.sample_noise::<f64, _>(2, &mut rng(4)).into_iter().map(|t| g.leaf(t, true)).collect();
    let out = gen.generate(&cx, &z).unwrap();
    let loss = g.mean(g.mul(out.image(), out.image()).unwrap()).unwrap();
    g.backward(loss).unwrap();
    let gz = g.grad(z[0]).unwrap();
    assert!(gz.max_abs() > 0.0);
}

fn variant(kind: VariantKind) -> (Generator, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let gen = build_variant(&VariantSpec::new(kind, tiny_model()), &mut store, &mut rng(3)).unwrap();
    (gen, store)
}

#[test]
fn no_transform_build_has_no_pose_head() {
    let (_, store) = variant(VariantKind::NoTransform);
    assert!(store.params().iter().all(|p| !p.name.contains("pose")));
    let (_, full) = variant(VariantKind::Full);
    assert!(full.params().iter().any(|p| p.name.contains("pose")));
}

#[test]
fn no_mask_composite_is_blend_free() {
    let (gen, store) = variant(VariantKind::NoMask);
    assert!(store.params().iter().all(|p| !p.name.contains("mask")));
    let g = Graph::new();
    let cx = Ctx::new(&g, &store, Mode::Sample);
    let out = gen.generate(&cx, &noise(&g, &gen, 4, 8)).unwrap();
    let l = &out.layers[0];
    let (bg, fh, x) = (g.value(out.background), g.value(l.f_hat), g.value(l.x));
    let mut from_fg = 0;
    for i in 0..x.len() {
        let v = x.data()[i];
        assert!(v == bg.data()[i] || v == fh.data()[i], "pixel {i} is a blend");
        from_fg += usize::from(v == fh.data()[i] && v != bg.data()[i]);
    }
    assert!(from_fg > 0);
}

#[test]
fn conditional_build_reconstructs_its_input_shape() {
    let (gen, store) = variant(VariantKind::Conditional);
    let x = toy_images(2, 3, 8, 0).cast::<f64>();
    let vals = gen.reconstruct_values(&store, &x, Mode::Sample).unwrap();
    assert_eq!(vals.image().shape(), x.shape());
    assert!(Generator::new(ModelConfig { variant: VariantKind::Conditional, timesteps: 1, use_lstm: true, ..tiny_model() }, &mut ParamStore::<f64>::new(), &mut rng(0)).is_err());
}

#[test]
fn sampling_is_deterministic_under_a_seed() {
    let (gen, store) = build(tiny_model());
    let a = gen.sample(&store, 3, Mode::Sample, &mut rng(5)).unwrap();
    let b = gen.sample(&store, 3, Mode::Sample, &mut rng(5)).unwrap();
    assert_eq!(a.image(), b.image());
}

//! Randomized invariants.

mod common;

use common::*;
use lrgan::autodiff::blend_pixels;
use lrgan::config::TrainConfig;
use lrgan::io::quantize;
use lrgan::metrics::{hungarian, mask_binariness, score_from_probs};
use lrgan::stn::constrain_pose;
use lrgan::training::epoch_order;
use lrgan::Tensor;
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f32> {
    0.0f32..=1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn blend_stays_between_its_inputs(px in prop::collection::vec((unit(), -1.0f32..1.0, -1.0f32..1.0), 1..40)) {
        let m: Vec<f32> = px.iter().map(|p| p.0).collect();
        let f: Vec<f32> = px.iter().map(|p| p.1).collect();
        let prev: Vec<f32> = px.iter().map(|p| p.2).collect();
        let out = blend_pixels(&m, &f, &prev, 1, m.len());
        for i in 0..m.len() {
            let (lo, hi) = (f[i].min(prev[i]), f[i].max(prev[i]));
            prop_assert!(out[i] >= lo - 1e-6 && out[i] <= hi + 1e-6);
        }
    }

    #[test]
    fn quantize_is_monotone(a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo) <= quantize(hi));
    }

    #[test]
    fn constrained_pose_respects_scale_and_translation_bounds(
        raw in prop::collection::vec(-50.0f64..50.0, 6),
        s_min in 1.0f64..3.0,
    ) {
        let pose = constrain_pose(&Tensor::new(&[1, 6], raw).unwrap(), s_min).unwrap();
        let [sx, _, tx, _, sy, ty] = pose.row(0);
        prop_assert!(sx >= s_min - 1e-12 && sy >= s_min - 1e-12);
        prop_assert!(tx.abs() <= sx - 1.0 + 1e-9);
        prop_assert!(ty.abs() <= sy - 1.0 + 1e-9);
    }

    #[test]
    fn config_text_round_trips(
        batch in 2usize..512,
        lr in 1e-6f64..1e-1,
        beta1 in 0.0f64..0.99,
        seed in any::<u64>(),
        epochs in 1usize..100,
        minimax in any::<bool>(),
        samples in 1usize..100_000,
    ) {
        let mut c = TrainConfig::new(tiny_model());
        c.batch_size = batch;
        c.lr_g = lr;
        c.lr_d = lr * 0.5;
        c.beta1 = beta1;
        c.seed = seed;
        c.epochs = epochs;
        c.minimax = minimax;
        c.data.num_samples = samples;
        prop_assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn epoch_order_is_a_permutation(seed in any::<u64>(), epoch in 0usize..50, n in 0usize..300) {
        let mut order = epoch_order(seed, epoch, n);
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn score_lies_between_one_and_class_count(
        k in 2usize..8,
        logits in prop::collection::vec(-6.0f64..6.0, 8 * 40),
        splits in 1usize..4,
    ) {
        let n = 40;
        let mut probs = Vec::with_capacity(n * k);
        for row in logits.chunks(8).take(n) {
            let e: Vec<f64> = row[..k].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        let (mean, _) = score_from_probs(&Tensor::new(&[n, k], probs).unwrap(), splits).unwrap();
        prop_assert!(mean >= 1.0 - 1e-9 && mean <= k as f64 * (1.0 + 1e-9), "score {}", mean);
    }

    #[test]
    fn binariness_is_a_fraction(masks in prop::collection::vec(unit(), 0..200)) {
        let b = mask_binariness(&masks);
        prop_assert!((0.0..=1.0).contains(&b));
        let manual = masks.iter().filter(|&&m| !(0.1..=0.9).contains(&m)).count();
        prop_assert_eq!(b, if masks.is_empty() { 0.0 } else { manual as f64 / masks.len() as f64 });
    }

    #[test]
    fn matching_is_no_worse_than_any_fixed_permutation(
        n in 1usize..12,
        cost in prop::collection::vec(0.0f64..100.0, 144),
        shift in 0usize..12,
    ) {
        let cost = &cost[..n * n];
        let a = hungarian(cost, n).unwrap();
        let mut seen = a.assignment.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let recomputed: f64 = a.assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        prop_assert!((recomputed - a.total).abs() < 1e-9);
        let identity: f64 = (0..n).map(|i| cost[i * n + i]).sum();
        let shifted: f64 = (0..n).map(|i| cost[i * n + (i + shift) % n]).sum();
        prop_assert!(a.total <= identity + 1e-9 && a.total <= shifted + 1e-9);
    }
}

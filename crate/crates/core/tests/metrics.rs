//! Evaluation metrics against brute-force and closed-form oracles.

mod common;

use common::*;
use lrgan::data::ImageSet;
use lrgan::metrics::hungarian::l2_cost_matrix;
use lrgan::metrics::{
    accuracy, adversarial_accuracy, adversarial_divergence, aggregate_csv, hungarian, hungarian_pair, mean_kl, nn_accuracy,
    score_from_probs, train_classifier, ClassifierConfig,
};
use lrgan::Tensor;
use rand::Rng;

#[test]
fn hungarian_matches_brute_force_on_small_matrices() {
    let mut r = rng(2024);
    for case in 0..100 {
        let n = 1 + case % 7;
        let integer = case % 3 == 0;
        let cost: Vec<f64> =
            (0..n * n).map(|_| if integer { r.random_range(0..5) as f64 } else { r.random_range(-10.0..10.0) }).collect();
        let got = hungarian(&cost, n).unwrap();
        let mut seen = vec![false; n];
        for &j in &got.assignment {
            assert!(!seen[j], "case {case}: column {j} used twice");
            seen[j] = true;
        }
        let want = brute_force_assignment(&cost, n);
        assert!((got.total - want).abs() < 1e-9, "case {case}: {} vs {want}", got.total);
    }
}

#[test]
fn hungarian_handles_a_few_hundred_rows() {
    let mut r = rng(1);
    let n = 300;
    let cost: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
    let a = hungarian(&cost, n).unwrap();
    // Any single swap of two rows cannot improve an optimal assignment.
    for _ in 0..2000 {
        let (i, k) = (r.random_range(0..n), r.random_range(0..n));
        let (ji, jk) = (a.assignment[i], a.assignment[k]);
        let delta = cost[i * n + jk] + cost[k * n + ji] - cost[i * n + ji] - cost[k * n + jk];
        assert!(delta > -1e-9);
    }
}

#[test]
fn pairing_recovers_a_shuffled_copy() {
    let a = toy_images(12, 3, 4, 5);
    let perm = [3, 7, 0, 11, 5, 1, 9, 2, 10, 4, 8, 6];
    let b = a.select(&perm);
    let res = hungarian_pair(&a, &b).unwrap();
    for (i, &j) in res.assignment.iter().enumerate() {
        assert_eq!(perm[j], i);
    }
    assert_eq!(res.total, 0.0);
    let c = l2_cost_matrix(&a, &b).unwrap();
    assert_eq!(c.len(), 144);
}

fn probs(rows: Vec<Vec<f64>>) -> Tensor<f64> {
    let k = rows[0].len();
    Tensor::new(&[rows.len(), k], rows.concat()).unwrap()
}

#[test]
fn score_is_one_for_identical_conditionals() {
    let mut r = rng(3);
    for k in [2, 5, 10] {
        let mut row: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        let p = probs(vec![row; 60]);
        for splits in [1, 3, 10] {
            assert_eq!(score_from_probs(&p, splits).unwrap(), (1.0, 0.0));
        }
    }
}

#[test]
fn score_is_k_for_balanced_one_hot_inputs() {
    for k in [2usize, 3, 7, 10] {
        let rows: Vec<Vec<f64>> = (0..20 * k).map(|i| (0..k).map(|j| if j == i % k { 1.0 } else { 0.0 }).collect()).collect();
        let (mean, std) = score_from_probs(&probs(rows), 1).unwrap();
        // exp(ln K) is K up to the rounding of exp and ln.
        assert!((mean - k as f64).abs() <= 2.0 * f64::EPSILON * k as f64, "K={k}: {mean}");
        assert_eq!(std, 0.0);
    }
}

#[test]
fn score_of_skewed_marginal_matches_closed_form() {
    // Two classes, one-hot with a 3:1 split: marginal (3/4, 1/4),
    // E KL = 3/4 ln(4/3) + 1/4 ln 4.
    let rows: Vec<Vec<f64>> = (0..40).map(|i| if i % 4 == 3 { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect();
    let want = (0.75 * (4.0f64 / 3.0).ln() + 0.25 * 4.0f64.ln()).exp();
    let (mean, _) = score_from_probs(&probs(rows), 1).unwrap();
    assert!((mean - want).abs() < 1e-12);
}

#[test]
fn kl_matches_direct_sum_and_is_zero_on_the_diagonal() {
    let p = probs(vec![vec![0.2, 0.8], vec![0.6, 0.4]]);
    let q = probs(vec![vec![0.5, 0.5], vec![0.1, 0.9]]);
    let direct = (0.2f64 * (0.2f64 / 0.5).ln() + 0.8 * (0.8f64 / 0.5).ln() + 0.6 * (6.0f64).ln() + 0.4 * (0.4f64 / 0.9).ln()) / 2.0;
    assert!((mean_kl(&p, &q).unwrap() - direct).abs() < 1e-12);
    assert_eq!(mean_kl(&p, &p).unwrap(), 0.0);
    assert!(mean_kl(&p, &q.select(&[0])).is_err());
}

/// Two classes told apart by which half of the image is bright.
fn halves(n: usize, seed: u64) -> ImageSet {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let images = Tensor::from_fn(&[n, 3, 16, 16], |i| {
        let (b, x) = (i / 768, i % 16);
        let bright = (x < 8) == (labels[b] == 0);
        (if bright { 0.6 } else { -0.6 }) + r.random_range(-0.3f32..0.3)
    });
    ImageSet::new(images, labels).unwrap()
}

#[test]
fn classifier_learns_a_separable_toy_task() {
    let cfg = ClassifierConfig { epochs: 8, batch_size: 16, ..ClassifierConfig::new(&[8, 16]) };
    let clf = train_classifier(&halves(128, 1), 2, &cfg).unwrap();
    let val = halves(64, 2);
    let p = clf.predict(&val.images).unwrap();
    let acc = accuracy(&p, &val.labels);
    assert!(acc > 0.95, "accuracy {acc}");
    for row in p.data().chunks_exact(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
    }
    // The same data and seed train the same classifier, so both scores coincide.
    let twin = train_classifier(&halves(128, 1), 2, &cfg).unwrap();
    let (a, b) = adversarial_accuracy(&clf, &twin, &val).unwrap();
    assert_eq!(a, b);
    assert_eq!(adversarial_divergence(&clf, &twin, &val).unwrap(), 0.0);
}

#[test]
fn nearest_neighbour_accuracy_on_clustered_features() {
    let mut r = rng(4);
    let centers = [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut make = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data: Vec<f32> = labels.iter().flat_map(|&l| centers[l].map(|c| c * 5.0 + r.random_range(-0.5..0.5))).collect();
        (Tensor::new(&[n, 3], data).unwrap(), labels)
    };
    let (tr, tl) = make(30);
    let (te, tel) = make(30);
    assert_eq!(nn_accuracy(&tr, &tl, &te, &tel).unwrap(), 1.0);
    let flipped: Vec<usize> = tel.iter().map(|l| (l + 1) % 3).collect();
    assert_eq!(nn_accuracy(&tr, &tl, &te, &flipped).unwrap(), 0.0);
}

#[test]
fn judge_aggregation_from_csv() {
    let text = "image_id,judge_id,label\nimg1,a,7\nimg1,b,7\nimg1,c,1\nimg2,a,NR\nimg2,b,NR\nimg3,a,2\nimg3,b,5\n";
    let rows = aggregate_csv(text).unwrap();
    let levels: Vec<_> = rows.iter().map(|(id, q)| (id.as_str(), q.label, q.level)).collect();
    assert_eq!(levels, vec![("img1", Some(7), 2), ("img2", None, 0), ("img3", Some(2), 1)]);
}

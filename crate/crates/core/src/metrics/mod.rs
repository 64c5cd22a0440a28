//! Evaluation: classifier-based scores, 1-NN features, Hungarian pairing,
//! judge aggregation and mask/pose statistics.

pub mod classifier;
pub mod hungarian;
pub mod quality;

pub use classifier::{
    accuracy, adversarial_accuracy, adversarial_divergence, classifier_score, mean_kl, nn_accuracy, nn_feature_eval, score_from_probs,
    train_classifier, Classifier, ClassifierConfig,
};
pub use hungarian::{hungarian, hungarian_pair, Assignment};
pub use quality::{aggregate_csv, aggregate_quality, JudgeLabel, Quality};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stn::AffineParams;

/// Fraction of mask values below 0.1 or above 0.9.
pub fn mask_binariness(masks: &[f32]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks.iter().filter(|&&m| !(0.1..=0.9).contains(&m)).count() as f64 / masks.len() as f64
}

/// Names of the six pose parameters in storage order.
pub const POSE_NAMES: [&str; 6] = ["s_x", "r_x", "t_x", "r_y", "s_y", "t_y"];

/// Equal-width counts over `[min, max]` of the observed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(name: &'static str, values: &[f64], bins: usize) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0u64; bins];
        let width = max - min;
        for &v in values {
            let b = if width > 0.0 { (((v - min) / width) * bins as f64) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Self { name, min, max, counts }
    }

    /// Spread of the observed values.
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// One histogram per pose parameter over every row of every batch.
pub fn transform_histograms(poses: &[AffineParams<f32>], bins: usize) -> Result<[Histogram; 6]> {
    if bins == 0 {
        return Err(Error::Invalid("histograms need at least one bin".into()));
    }
    let rows: Vec<[f64; 6]> = poses.iter().flat_map(|p| (0..p.len()).map(move |i| p.row(i).map(|v| v as f64))).collect();
    if rows.is_empty() {
        return Err(Error::Invalid("no poses to summarize".into()));
    }
    Ok(std::array::from_fn(|k| {
        let values: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        Histogram::build(POSE_NAMES[k], &values, bins)
    }))
}

/// `parameter,bin,lo,hi,count` rows.
pub fn histograms_csv(hists: &[Histogram]) -> String {
    let mut s = String::from("parameter,bin,lo,hi,count\n");
    for h in hists {
        let bins = h.counts.len();
        for (b, c) in h.counts.iter().enumerate() {
            let lo = h.min + (h.max - h.min) * b as f64 / bins as f64;
            let hi = h.min + (h.max - h.min) * (b + 1) as f64 / bins as f64;
            let _ = writeln!(s, "{},{b},{lo},{hi},{c}", h.name);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn binariness_cases() {
        assert_eq!(mask_binariness(&[0.5; 8]), 0.0);
        assert_eq!(mask_binariness(&[0.05; 8]), 1.0);
        assert_eq!(mask_binariness(&[0.05, 0.5, 0.05, 0.5]), 0.5);
    }

    #[test]
    fn constant_poses_fill_one_bin() {
        let p = AffineParams::new(Tensor::new(&[4, 6], [1.5f32, 0.0, 0.1, 0.0, 1.5, -0.2].repeat(4)).unwrap()).unwrap();
        let hs = transform_histograms(&[p], 10).unwrap();
        for h in &hs {
            assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
            assert_eq!(h.counts.iter().sum::<u64>(), 4);
        }
        assert!(histograms_csv(&hs).lines().count() == 61);
    }
}

//! Evaluation and diagnostic computations: confusion matrices, per-class
//! recall, balanced/top-1 accuracy, and the L2 distribution diagnostics.
//!
//! All functions here are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{ClassDistribution, DistributionKind, ProbVector};

/// K x K count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        if true_class >= k || predicted >= k {
            return Err(Error::InvalidInput(format!(
                "label pair ({true_class}, {predicted}) out of range 0..{k}"
            )));
        }
        self.counts[true_class][predicted] += 1;
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

/// counts[i][j] = #{n : true = i, predicted = j}.
pub fn confusion(true_labels: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "label length mismatch: {} true vs {} predicted",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in true_labels.iter().zip(predicted) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// recall[i] = counts[i][i] / row_sum[i]. Empty rows report NaN.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<f64> {
    cm.counts()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect()
}

/// Mean of the per-class recalls. NaN rows propagate.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    let recalls = per_class_recall(cm);
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Fraction of all evaluated samples on the diagonal.
pub fn top1_accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        f64::NAN
    } else {
        cm.trace() as f64 / total as f64
    }
}

/// Euclidean distance between two class distributions.
pub fn l2_distribution_distance(a: &ClassDistribution, b: &ClassDistribution) -> f64 {
    assert_eq!(a.num_classes(), b.num_classes(), "class count mismatch");
    a.probs()
        .values()
        .iter()
        .zip(b.probs().values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Normalizes a pseudo-label histogram into a distribution. An all-zero
/// histogram falls back to uniform.
pub fn pseudo_label_distribution(histogram: &[f64]) -> ClassDistribution {
    debug_assert!(histogram.iter().all(|h| *h >= 0.0));
    let total: f64 = histogram.iter().sum();
    if total <= 0.0 {
        return ClassDistribution::uniform(histogram.len());
    }
    let probs: Vec<f64> = histogram.iter().map(|h| h / total).collect();
    ClassDistribution::new(
        ProbVector::new(probs).expect("normalized histogram is a distribution"),
        DistributionKind::PseudoLabel,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.trace(), 4);
        assert_eq!(cm.total(), 4);
        assert!(per_class_recall(&cm).iter().all(|r| *r == 1.0));
        assert_eq!(balanced_accuracy(&cm), 1.0);
        assert_eq!(top1_accuracy(&cm), 1.0);
    }

    #[test]
    fn collapsed_predictions_fill_one_column() {
        let cm = confusion(&[0, 1, 2], &[0, 0, 0], 3).unwrap();
        for (i, row) in cm.counts().iter().enumerate() {
            assert_eq!(row[0], 1, "row {i}");
            assert!(row[1..].iter().all(|c| *c == 0));
        }
    }

    #[test]
    fn hand_counted_five_sample_case() {
        let cm = confusion(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1], vec![1, 2]]);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        assert!(confusion(&[0, 3], &[0, 0], 3).is_err());
        assert!(confusion(&[0], &[5], 3).is_err());
    }

    #[test]
    fn recall_examples() {
        let mut cm = ConfusionMatrix::zeros(2);
        for _ in 0..8 {
            cm.add(0, 0).unwrap();
        }
        cm.add(0, 1).unwrap();
        cm.add(0, 1).unwrap();
        cm.add(1, 1).unwrap();
        let recalls = per_class_recall(&cm);
        assert_abs_diff_eq!(recalls[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(recalls[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn three_class_hand_arithmetic() {
        let cm = confusion(&[0, 0, 1, 1, 1, 2], &[0, 1, 1, 2, 1, 2], 3).unwrap();
        let recalls = per_class_recall(&cm);
        assert_abs_diff_eq!(recalls[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(recalls[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(recalls[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            balanced_accuracy(&cm),
            (0.5 + 2.0 / 3.0 + 1.0) / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_row_reports_nan_sentinel() {
        let cm = confusion(&[0, 0], &[0, 1], 3).unwrap();
        let recalls = per_class_recall(&cm);
        assert!(recalls[1].is_nan());
        assert!(recalls[2].is_nan());
        assert!(balanced_accuracy(&cm).is_nan());
    }

    #[test]
    fn chance_level_on_a_balanced_test_set() {
        // Uniform "predictions" spread evenly: both metrics sit at 1/K.
        let k = 10;
        let mut cm = ConfusionMatrix::zeros(k);
        for t in 0..k {
            for p in 0..k {
                for _ in 0..5 {
                    cm.add(t, p).unwrap();
                }
            }
        }
        assert_abs_diff_eq!(balanced_accuracy(&cm), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(top1_accuracy(&cm), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn l2_examples() {
        let uniform = ClassDistribution::uniform(2);
        assert_eq!(l2_distribution_distance(&uniform, &uniform), 0.0);

        let a = pseudo_label_distribution(&[1.0, 0.0]);
        let b = pseudo_label_distribution(&[0.0, 1.0]);
        assert_abs_diff_eq!(l2_distribution_distance(&a, &b), 2.0f64.sqrt(), epsilon = 1e-12);

        let c = pseudo_label_distribution(&[3.0, 1.0]);
        assert_abs_diff_eq!(
            l2_distribution_distance(&c, &uniform),
            0.353553390593274,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pseudo_label_distribution_examples() {
        let d = pseudo_label_distribution(&[5.0, 5.0]);
        assert_eq!(d.probs().values(), &[0.5, 0.5]);
        assert_eq!(d.kind(), DistributionKind::PseudoLabel);

        let d = pseudo_label_distribution(&[10.0, 0.0]);
        assert_eq!(d.probs().values(), &[1.0, 0.0]);

        let d = pseudo_label_distribution(&[3.0, 1.0, 0.0]);
        assert_eq!(d.probs().values(), &[0.75, 0.25, 0.0]);

        let empty = pseudo_label_distribution(&[0.0, 0.0, 0.0]);
        assert_eq!(empty.kind(), DistributionKind::Uniform);
    }

    proptest! {
        // The matrix pipeline agrees with brute-force recomputation from
        // the raw label pairs.
        #[test]
        fn agrees_with_brute_force(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 4..120),
        ) {
            let truths: Vec<usize> = pairs.iter().map(|(t, _)| *t).collect();
            let preds: Vec<usize> = pairs.iter().map(|(_, p)| *p).collect();
            let cm = confusion(&truths, &preds, 4).unwrap();

            let mut brute = vec![vec![0u64; 4]; 4];
            for (t, p) in &pairs {
                brute[*t][*p] += 1;
            }
            prop_assert_eq!(cm.counts(), brute.as_slice());

            let have_all_rows = (0..4).all(|c| truths.contains(&c));
            if have_all_rows {
                let recalls = per_class_recall(&cm);
                for c in 0..4 {
                    let hits = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
                    let total = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
                    prop_assert!((recalls[c] - hits / total).abs() < 1e-12);
                }
                let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
                prop_assert!((top1_accuracy(&cm) - correct / pairs.len() as f64).abs() < 1e-12);
            }
        }

        // Metric axioms for the L2 distance on random triples.
        #[test]
        fn l2_is_a_metric(
            ha in proptest::collection::vec(0.01f64..10.0, 4),
            hb in proptest::collection::vec(0.01f64..10.0, 4),
            hc in proptest::collection::vec(0.01f64..10.0, 4),
        ) {
            let a = pseudo_label_distribution(&ha);
            let b = pseudo_label_distribution(&hb);
            let c = pseudo_label_distribution(&hc);

            let ab = l2_distribution_distance(&a, &b);
            let ba = l2_distribution_distance(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(l2_distribution_distance(&a, &a) == 0.0);

            let ac = l2_distribution_distance(&a, &c);
            let cb = l2_distribution_distance(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        // On an exactly balanced test set top-1 equals balanced accuracy.
        #[test]
        fn balanced_test_set_collapses_the_two_metrics(
            preds in proptest::collection::vec(0usize..3, 30),
        ) {
            // 10 samples per class, predictions arbitrary.
            let truths: Vec<usize> = (0..30).map(|i| i / 10).collect();
            let cm = confusion(&truths, &preds, 3).unwrap();
            prop_assert!((top1_accuracy(&cm) - balanced_accuracy(&cm)).abs() < 1e-12);
        }
    }
}

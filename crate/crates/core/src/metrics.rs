//! Accuracy and intra-class distance evaluation.

use crate::data::ClassGroups;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-group top-1 accuracy. A group with no samples is reported as absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Evaluation summary for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub overall_top1: f64,
    pub group_top1: GroupAccuracy,
    /// Mean distance to the class centroid, per class; `null` for classes
    /// absent from the evaluation set.
    pub per_class_icd: Vec<Option<f64>>,
    /// Unweighted mean of the per-class distances over present classes.
    pub avg_icd: f64,
}

/// Fraction of exact prediction matches.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument {
            arg: "predictions",
            reason: format!(
                "need equal non-zero lengths, got {} and {}",
                predictions.len(),
                labels.len()
            ),
        });
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy restricted to samples whose true class falls in each group.
pub fn grouped_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &ClassGroups,
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument {
            arg: "predictions",
            reason: "length mismatch with labels".into(),
        });
    }
    let restrict = |classes: &[usize]| -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (p, y) in predictions.iter().zip(labels) {
            if classes.binary_search(y).is_ok() {
                total += 1;
                hits += usize::from(p == y);
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    };
    Ok(GroupAccuracy {
        many: restrict(&groups.many),
        medium: restrict(&groups.medium),
        few: restrict(&groups.few),
    })
}

/// Per-class mean Euclidean distance to the class centroid, plus the mean
/// over present classes.
pub fn intra_class_distance(
    features: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    if features.nrows() == 0 || features.nrows() != labels.len() {
        return Err(Error::InvalidArgument {
            arg: "features",
            reason: "need a non-empty feature matrix matching labels".into(),
        });
    }
    let dim = features.ncols();
    let mut centers = Array2::<f64>::zeros((num_classes, dim));
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!("label {y} out of range"),
            });
        }
        counts[y] += 1;
        let mut row = centers.row_mut(y);
        row += &features.row(i);
    }
    for y in 0..num_classes {
        if counts[y] > 0 {
            let mut row = centers.row_mut(y);
            row /= counts[y] as f64;
        }
    }
    let mut dist_sums = vec![0.0f64; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let d: f64 = features
            .row(i)
            .iter()
            .zip(centers.row(y).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        dist_sums[y] += d;
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|y| (counts[y] > 0).then(|| dist_sums[y] / counts[y] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    let avg = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::group_classes;
    use ndarray::arr2;

    #[test]
    fn top1_counts_matches() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(top1_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn grouped_recomposes_overall() {
        let groups = group_classes(&[150, 50, 10]).unwrap();
        let labels = vec![0, 0, 0, 1, 1, 2];
        let preds = vec![0, 0, 1, 1, 0, 2];
        let overall = top1_accuracy(&preds, &labels).unwrap();
        let g = grouped_accuracy(&preds, &labels, &groups).unwrap();
        let recomposed =
            (g.many.unwrap() * 3.0 + g.medium.unwrap() * 2.0 + g.few.unwrap() * 1.0) / 6.0;
        assert!((overall - recomposed).abs() < 1e-12);
    }

    #[test]
    fn empty_group_reported_absent() {
        let groups = group_classes(&[150, 120]).unwrap();
        let g = grouped_accuracy(&[0, 1], &[0, 1], &groups).unwrap();
        assert_eq!(g.many, Some(1.0));
        assert_eq!(g.medium, None);
        assert_eq!(g.few, None);
    }

    #[test]
    fn icd_identical_features_is_zero() {
        let f = arr2(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let (per, avg) = intra_class_distance(&f, &[0, 0, 0], 1).unwrap();
        assert_eq!(per[0], Some(0.0));
        assert_eq!(avg, 0.0);
    }

    #[test]
    fn icd_hand_computed_pair() {
        let f = arr2(&[[0.0, 0.0], [2.0, 0.0]]);
        let (per, avg) = intra_class_distance(&f, &[0, 0], 1).unwrap();
        assert!((per[0].unwrap() - 1.0).abs() < 1e-12);
        assert!((avg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn icd_translation_invariant() {
        let f = arr2(&[[0.0, 1.0], [2.0, -1.0], [5.0, 4.0], [4.0, 5.0]]);
        let labels = [0, 0, 1, 1];
        let (per_a, _) = intra_class_distance(&f, &labels, 2).unwrap();
        let shifted = &f + 13.5;
        let (per_b, _) = intra_class_distance(&shifted, &labels, 2).unwrap();
        for (a, b) in per_a.iter().zip(&per_b) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn icd_absent_class_is_null() {
        let f = arr2(&[[0.0, 0.0], [2.0, 0.0]]);
        let (per, avg) = intra_class_distance(&f, &[0, 0], 3).unwrap();
        assert_eq!(per[1], None);
        assert_eq!(per[2], None);
        assert!((avg - 1.0).abs() < 1e-12);
    }
}

//! Label-distribution-aware margin loss over cosine logits.

use crate::error::{Error, Result};
use crate::tensor::ops::logsumexp_rows;
use crate::tensor::{Arr, Var};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

/// Per-class additive margins plus the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    /// Margin subtracted from the true-class cosine, one per class.
    pub deltas: Vec<f64>,
    /// Largest margin (assigned to the smallest class).
    pub max_m: f64,
    /// Scale applied to all logits after the margin shift.
    pub s: f64,
}

impl MarginTable {
    /// All-zero margins: the loss reduces to softmax cross-entropy on
    /// `s`-scaled logits. Used for plain cross-entropy baselines.
    pub fn zeros(num_classes: usize, s: f64) -> Self {
        MarginTable {
            deltas: vec![0.0; num_classes],
            max_m: 0.0,
            s,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.deltas.len()
    }
}

/// Margins proportional to n_j^(-1/4), rescaled so the smallest class gets
/// exactly `max_m`.
pub fn ldam_margins(counts: &[usize], max_m: f64, s: f64) -> Result<MarginTable> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "counts",
            reason: "must be non-empty".into(),
        });
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument {
            arg: "counts",
            reason: "all class counts must be at least 1".into(),
        });
    }
    if !(max_m.is_finite() && max_m > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "max_m",
            reason: format!("must be positive, got {max_m}"),
        });
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "s",
            reason: format!("must be positive, got {s}"),
        });
    }
    let raw: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(-0.25)).collect();
    let largest = raw.iter().copied().fold(f64::MIN, f64::max);
    let scale = max_m / largest;
    Ok(MarginTable {
        deltas: raw.into_iter().map(|r| scale * r).collect(),
        max_m,
        s,
    })
}

/// Batch-mean margin loss: the true-class logit is shifted down by its class
/// margin, everything is scaled by `s`, and a standard softmax cross-entropy
/// follows.
pub fn ldam_loss(logits: &Var, labels: &[usize], margins: &MarginTable) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "ldam_loss",
            expected: vec![labels.len()],
            actual: shape,
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if b == 0 {
        return Err(Error::InvalidArgument {
            arg: "logits",
            reason: "empty batch".into(),
        });
    }
    if margins.num_classes() != c {
        return Err(Error::ShapeMismatch {
            context: "ldam_loss margins",
            expected: vec![c],
            actual: vec![margins.num_classes()],
        });
    }
    for &y in labels {
        if y >= c {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!("label {y} out of range for {c} classes"),
            });
        }
    }

    let mut margin_mat = Arr::zeros(IxDyn(&[b, c]));
    let mut onehot = Arr::zeros(IxDyn(&[b, c]));
    for (i, &y) in labels.iter().enumerate() {
        margin_mat[[i, y]] = margins.deltas[y];
        onehot[[i, y]] = 1.0;
    }
    let adjusted = logits
        .sub(&Var::constant(margin_mat))
        .mul_scalar(margins.s);
    let lse = logsumexp_rows(&adjusted, None); // [B, 1]
    let target = adjusted.mul(&Var::constant(onehot)).sum_axes(&[1], true);
    Ok(lse.sub(&target).mean_all())
}

/// Value plus gradient with respect to the logits.
pub fn ldam_loss_with_grad(
    logits: &ndarray::Array2<f64>,
    labels: &[usize],
    margins: &MarginTable,
) -> Result<(f64, ndarray::Array2<f64>)> {
    let var = Var::param(logits.clone().into_dyn());
    let loss = ldam_loss(&var, labels, margins)?;
    loss.backward();
    let grad = var
        .grad()
        .expect("logits gradient")
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d gradient");
    Ok((loss.scalar_value(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn margin_table_rescales_to_max_m() {
        let t = ldam_margins(&[5000, 50], 0.5, 30.0).unwrap();
        assert!((t.deltas[1] - 0.5).abs() < 1e-12);
        // 0.5 * (50/5000)^(1/4) = 0.5 / sqrt(10)
        assert!((t.deltas[0] - 0.5 / 10f64.sqrt()).abs() < 1e-12);
        assert!((t.deltas[0] - 0.15811).abs() < 1e-4);
    }

    #[test]
    fn equal_counts_give_uniform_margins() {
        let t = ldam_margins(&[128, 128, 128], 0.5, 30.0).unwrap();
        assert!(t.deltas.iter().all(|&d| (d - 0.5).abs() < 1e-12));
    }

    #[test]
    fn margins_reverse_count_order() {
        let counts = [900usize, 30, 4000, 71];
        let t = ldam_margins(&counts, 0.5, 30.0).unwrap();
        let mut by_count: Vec<usize> = (0..counts.len()).collect();
        by_count.sort_by_key(|&j| counts[j]);
        let mut by_delta: Vec<usize> = (0..counts.len()).collect();
        by_delta.sort_by(|&a, &b| t.deltas[b].total_cmp(&t.deltas[a]));
        assert_eq!(by_count, by_delta);
    }

    #[test]
    fn zero_margin_unit_scale_is_cross_entropy() {
        let logits = arr2(&[[0.0, 0.0]]);
        let t = MarginTable::zeros(2, 1.0);
        let (v, _) = ldam_loss_with_grad(&logits, &[0], &t).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_with_margin() {
        let logits = arr2(&[[2.0, 0.0]]);
        let t = MarginTable {
            deltas: vec![0.5, 0.5],
            max_m: 0.5,
            s: 1.0,
        };
        let (v, _) = ldam_loss_with_grad(&logits, &[0], &t).unwrap();
        let expected = (1.0 + (-1.5f64).exp()).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.201413).abs() < 1e-6);
    }

    #[test]
    fn larger_margin_raises_loss() {
        let logits = arr2(&[[1.0, -0.2, 0.3]]);
        let small = MarginTable {
            deltas: vec![0.1, 0.1, 0.1],
            max_m: 0.1,
            s: 4.0,
        };
        let big = MarginTable {
            deltas: vec![0.4, 0.1, 0.1],
            max_m: 0.4,
            s: 4.0,
        };
        let (lo, _) = ldam_loss_with_grad(&logits, &[0], &small).unwrap();
        let (hi, _) = ldam_loss_with_grad(&logits, &[0], &big).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ldam_margins(&[], 0.5, 30.0).is_err());
        assert!(ldam_margins(&[10, 0], 0.5, 30.0).is_err());
        assert!(ldam_margins(&[10], -0.5, 30.0).is_err());

        let logits = arr2(&[[0.0, 0.0]]);
        let t = MarginTable::zeros(3, 1.0); // wrong class count
        assert!(ldam_loss_with_grad(&logits, &[0], &t).is_err());
        let t2 = MarginTable::zeros(2, 1.0);
        assert!(ldam_loss_with_grad(&logits, &[5], &t2).is_err());
    }
}

//! Supervised contrastive loss over unit-norm embeddings.

use crate::error::{Error, Result};
use crate::tensor::ops::logsumexp_rows;
use crate::tensor::{Arr, Var};
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

/// Additive mask value that zeroes an entry under exp() in f64.
const NEG_INF_MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SclConfig {
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for SclConfig {
    fn default() -> Self {
        SclConfig { tau: 0.1 }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "tau",
                reason: format!("temperature must be positive, got {}", self.tau),
            });
        }
        Ok(())
    }
}

/// Supervised contrastive loss.
///
/// Every sample with at least one same-class partner in the batch is an
/// anchor; each anchor averages -log softmax over its positives, and the
/// total is the mean over anchors. Samples whose class appears once
/// contribute nothing. Returns a differentiable scalar; with no anchors at
/// all the result is a constant zero.
pub fn scl_loss(embeddings: &Var, labels: &[usize], cfg: &SclConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "scl_loss",
            expected: vec![labels.len()],
            actual: shape,
        });
    }
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidArgument {
            arg: "embeddings",
            reason: format!("need a batch of at least 2, got {b}"),
        });
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite {
            location: "scl_loss embeddings".into(),
        });
    }

    let max_label = *labels.iter().max().expect("non-empty");
    let mut class_sizes = vec![0usize; max_label + 1];
    for &y in labels {
        class_sizes[y] += 1;
    }
    let num_anchors = labels.iter().filter(|&&y| class_sizes[y] >= 2).count();
    if num_anchors == 0 {
        return Ok(Var::scalar(0.0));
    }

    // Pairwise similarities with the diagonal masked out of every softmax.
    let sims = embeddings
        .matmul(&embeddings.transpose2())
        .mul_scalar(1.0 / cfg.tau);
    let mut mask = Arr::zeros(IxDyn(&[b, b]));
    for i in 0..b {
        mask[[i, i]] = NEG_INF_MASK;
    }
    let lse = logsumexp_rows(&sims, Some(&mask)); // [B, 1]
    let log_probs = sims.add(&Var::constant(mask.clone())).sub(&lse);

    // weight[i][p] = 1 / (|B_y| - 1) over the positives of anchor i
    let mut weights = Arr::zeros(IxDyn(&[b, b]));
    for i in 0..b {
        if class_sizes[labels[i]] < 2 {
            continue;
        }
        let w = 1.0 / (class_sizes[labels[i]] - 1) as f64;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                weights[[i, p]] = w;
            }
        }
    }

    Ok(log_probs
        .mul(&Var::constant(weights))
        .sum_all()
        .mul_scalar(-1.0 / num_anchors as f64))
}

/// Value plus exact gradient with respect to the embeddings.
pub fn scl_loss_with_grad(
    embeddings: &Array2<f64>,
    labels: &[usize],
    cfg: &SclConfig,
) -> Result<(f64, Array2<f64>)> {
    let var = Var::param(embeddings.clone().into_dyn());
    let loss = scl_loss(&var, labels, cfg)?;
    loss.backward();
    let grad = var
        .grad()
        .unwrap_or_else(|| Arr::zeros(IxDyn(&[embeddings.nrows(), embeddings.ncols()])))
        .into_dimensionality::<ndarray::Ix2>()
        .expect("embedding gradient is 2-d");
    Ok((loss.scalar_value(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn tau1() -> SclConfig {
        SclConfig { tau: 1.0 }
    }

    #[test]
    fn identical_pair_same_class_is_zero() {
        let z = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let (v, _) = scl_loss_with_grad(&z, &[0, 0], &tau1()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn three_sample_closed_form() {
        // two aligned anchors of class 0 and one orthogonal negative:
        // each anchor contributes -log(e / (e + 1))
        let z = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let (v, _) = scl_loss_with_grad(&z, &[0, 0, 1], &tau1()).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn no_positive_pairs_gives_zero_and_no_gradient() {
        let z = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let (v, g) = scl_loss_with_grad(&z, &[0, 1], &tau1()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn value_is_non_negative_and_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = rng.random_range(2..9usize);
            let d = rng.random_range(2..6usize);
            let mut z = Array2::<f64>::zeros((b, d));
            for mut row in z.rows_mut() {
                let mut norm = 0.0;
                for v in row.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                    norm += *v * *v;
                }
                let norm = norm.sqrt().max(1e-9);
                row.mapv_inplace(|v| v / norm);
            }
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
            let (v, _) = scl_loss_with_grad(&z, &labels, &SclConfig { tau: 0.5 }).unwrap();
            assert!(v >= -1e-12);

            // permute the batch
            let mut perm: Vec<usize> = (0..b).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let zp = z.select(ndarray::Axis(0), &perm);
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let (vp, _) = scl_loss_with_grad(&zp, &lp, &SclConfig { tau: 0.5 }).unwrap();
            assert!((v - vp).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_tiny_batch_and_nonfinite() {
        let z = arr2(&[[1.0, 0.0]]);
        assert!(scl_loss_with_grad(&z, &[0], &tau1()).is_err());
        let z = arr2(&[[f64::NAN, 0.0], [1.0, 0.0]]);
        assert!(scl_loss_with_grad(&z, &[0, 0], &tau1()).is_err());
    }
}

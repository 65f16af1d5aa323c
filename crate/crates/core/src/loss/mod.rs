//! The four training losses and their weighted combination.

mod cesc;
mod ldam;
mod mv;
mod scl;

pub use cesc::cesc_loss;
pub use ldam::{ldam_loss, ldam_loss_with_grad, ldam_margins, MarginTable};
pub use mv::{mv_loss, mv_loss_with_grad};
pub use scl::{scl_loss, scl_loss_with_grad, SclConfig};

use crate::error::{Error, Result};
use crate::tensor::Var;
use serde::{Deserialize, Serialize};

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Supervised contrastive term.
    pub alpha: f64,
    /// Margin classifier term.
    pub lambda: f64,
    /// Center estimation + pair term.
    pub eta: f64,
    /// Vector alignment term.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // alpha/lambda start balanced; eta and mu keep the auxiliary terms at
        // the same order of magnitude as the main ones.
        LossWeights {
            alpha: 1.0,
            lambda: 1.0,
            eta: 1e-5,
            mu: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument {
                    arg: "loss_weights",
                    reason: format!("{name} must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Fine-tuned (alpha, lambda) pairs reported for the long-tail CIFAR splits,
/// keyed by imbalance factor.
pub fn published_weights(dataset: &str, beta: u32) -> Option<(f64, f64)> {
    match (dataset, beta) {
        ("cifar10-lt", 10) => Some((1.969, 0.079)),
        ("cifar10-lt", 50) => Some((9.764, 2.520)),
        ("cifar10-lt", 100) => Some((6.299, 0.709)),
        ("cifar100-lt", 10) => Some((8.189, 0.787)),
        ("cifar100-lt", 50) => Some((8.819, 0.315)),
        ("cifar100-lt", 100) => Some((8.976, 0.472)),
        _ => None,
    }
}

/// The individual loss terms of one step, before weighting.
pub struct LossParts {
    pub scl: Var,
    pub ldam: Var,
    pub cesc: Var,
    pub mv: Option<Var>,
}

/// Weighted combination with phase gating: the vector-alignment term only
/// participates after `epoch > t_th`.
pub fn total_loss(
    parts: &LossParts,
    weights: &LossWeights,
    epoch: usize,
    t_th: usize,
) -> Result<Var> {
    weights.validate()?;
    let mut total = parts
        .scl
        .mul_scalar(weights.alpha)
        .add(&parts.ldam.mul_scalar(weights.lambda))
        .add(&parts.cesc.mul_scalar(weights.eta));
    if epoch > t_th {
        if let Some(mv) = &parts.mv {
            total = total.add(&mv.mul_scalar(weights.mu));
        }
    }
    Ok(total)
}

/// Scalar variant of [`total_loss`] for reporting and tests.
pub fn total_loss_value(
    scl: f64,
    ldam: f64,
    cesc: f64,
    mv: Option<f64>,
    weights: &LossWeights,
    epoch: usize,
    t_th: usize,
) -> Result<f64> {
    weights.validate()?;
    let mut total = weights.alpha * scl + weights.lambda * ldam + weights.eta * cesc;
    if epoch > t_th {
        if let Some(mv) = mv {
            total += weights.mu * mv;
        }
    }
    Ok(total)
}

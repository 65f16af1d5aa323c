//! Central finite-difference gradient checking.
//!
//! Used by the loss/layer test suites to validate analytic gradients. Kept in
//! the library (not `#[cfg(test)]`) so integration tests and downstream
//! consumers can reuse it; it never touches the backward pass it verifies.

use super::Arr;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(x: &Arr, h: f64, mut f: impl FnMut(&Arr) -> f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + h;
        let fp = f(&probe);
        probe[&idx] = orig - h;
        let fm = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients.
///
/// Each element is compared as |a - n| / max(|a|, |n|, 1e-6) so that
/// near-zero pairs do not produce spurious blowups.
pub fn max_rel_error(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

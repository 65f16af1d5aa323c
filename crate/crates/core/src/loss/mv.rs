//! Vector alignment loss for generated rare-class samples.

use crate::error::{Error, Result};
use crate::tensor::{Arr, Var};
use ndarray::IxDyn;

/// Floor applied to norms inside the cosine so zero vectors stay defined.
const NORM_EPS: f64 = 1e-12;

/// Three-part alignment objective over per-position channel vectors:
/// direction agreement between the transformed frequent displacement and the
/// rare displacement, length preservation of the transform, and a
/// log-likelihood push on the generated samples' same-class probability.
///
/// `transformed_fd` carries the gradient; `rare_fd` and `freq_fd` are plain
/// values. All maps are `[B_n, C, H, W]`; `pair_probs` is `[B_n]`.
pub fn mv_loss(
    transformed_fd: &Var,
    rare_fd: &Arr,
    freq_fd: &Arr,
    pair_probs: &Var,
) -> Result<Var> {
    let shape = transformed_fd.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "mv_loss transformed_fd",
            expected: vec![0, 0, 0, 0],
            actual: shape,
        });
    }
    let b_n = shape[0];
    if b_n == 0 {
        return Err(Error::InvalidArgument {
            arg: "transformed_fd",
            reason: "needs at least one generated sample".into(),
        });
    }
    if rare_fd.shape() != shape.as_slice() || freq_fd.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            context: "mv_loss displacements",
            expected: shape.clone(),
            actual: rare_fd.shape().to_vec(),
        });
    }
    if pair_probs.shape() != vec![b_n] {
        return Err(Error::ShapeMismatch {
            context: "mv_loss pair_probs",
            expected: vec![b_n],
            actual: pair_probs.shape(),
        });
    }
    if pair_probs.with_value(|v| v.iter().any(|&g| !(g > 0.0 && g < 1.0))) {
        return Err(Error::InvalidArgument {
            arg: "pair_probs",
            reason: "probabilities must lie strictly inside (0, 1)".into(),
        });
    }

    let rare = Var::constant(rare_fd.clone());

    // Per-position norms with an epsilon floor under the square root.
    let t_norm = transformed_fd
        .square()
        .sum_axes(&[1], false)
        .clamp_min(NORM_EPS * NORM_EPS)
        .sqrt(); // [B_n, H, W]
    let rare_norm_vals = position_norms(rare_fd);
    let rare_norm = Var::constant(rare_norm_vals.clone());
    let freq_norm = Var::constant(position_norms(freq_fd));

    // Positions where both vectors are degenerate are masked out of term 1.
    let t_norm_vals = t_norm.value();
    let mut mask = Arr::ones(IxDyn(t_norm_vals.shape()));
    for (idx, m) in mask.indexed_iter_mut() {
        let tv = t_norm_vals[&idx];
        let rv = rare_norm_vals[&idx];
        if tv <= NORM_EPS && rv <= NORM_EPS {
            *m = 0.0;
        }
    }

    let dot = transformed_fd.mul(&rare).sum_axes(&[1], false);
    let cosine = dot.div(&t_norm.mul(&rare_norm));
    let direction = cosine
        .add_scalar(-1.0)
        .abs()
        .mul(&Var::constant(mask))
        .sum_axes(&[1, 2], false)
        .mean_all();

    let length = t_norm
        .sub(&freq_norm)
        .abs()
        .sum_axes(&[1, 2], false)
        .mean_all();

    let likelihood = pair_probs.ln().neg().mean_all();

    Ok(direction.add(&length).add(&likelihood))
}

/// L2 norm over channels at every `[b, h, w]`, floored at `NORM_EPS`.
fn position_norms(map: &Arr) -> Arr {
    let shape = map.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Arr::zeros(IxDyn(&[b, h, w]));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut s = 0.0;
                for ci in 0..c {
                    let v = map[[bi, ci, hi, wi]];
                    s += v * v;
                }
                out[[bi, hi, wi]] = s.sqrt().max(NORM_EPS);
            }
        }
    }
    out
}

/// Value plus gradient with respect to the transformed displacement.
pub fn mv_loss_with_grad(
    transformed_fd: &Arr,
    rare_fd: &Arr,
    freq_fd: &Arr,
    pair_probs: &Arr,
) -> Result<(f64, Arr)> {
    let t = Var::param(transformed_fd.clone());
    let p = Var::constant(pair_probs.clone());
    let loss = mv_loss(&t, rare_fd, freq_fd, &p)?;
    loss.backward();
    Ok((loss.scalar_value(), t.grad().expect("transform gradient")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], vals: &[f64]) -> Arr {
        Arr::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn perfectly_aligned_transform_is_zero() {
        // transformed colinear with rare, same length as freq, confident pair
        let t = tensor(&[1, 2, 1, 1], &[2.0, 0.0]);
        let rare = tensor(&[1, 2, 1, 1], &[4.0, 0.0]);
        let freq = tensor(&[1, 2, 1, 1], &[0.0, 2.0]);
        let probs = tensor(&[1], &[1.0 - 1e-12]);
        let (v, _) = mv_loss_with_grad(&t, &rare, &freq, &probs).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn orthogonal_direction_costs_one() {
        let t = tensor(&[1, 2, 1, 1], &[0.0, 1.0]);
        let rare = tensor(&[1, 2, 1, 1], &[1.0, 0.0]);
        let freq = tensor(&[1, 2, 1, 1], &[1.0, 0.0]); // norm 1 matches transformed
        let probs = tensor(&[1], &[1.0 - 1e-12]);
        let (v, _) = mv_loss_with_grad(&t, &rare, &freq, &probs).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn value_is_non_negative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let shape = [2usize, 3, 2, 2];
            let n: usize = shape.iter().product();
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                tensor(&shape, &v)
            };
            let t = draw(&mut rng);
            let rare = draw(&mut rng);
            let freq = draw(&mut rng);
            let probs = tensor(
                &[2],
                &[rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)],
            );
            let (v, _) = mv_loss_with_grad(&t, &rare, &freq, &probs).unwrap();
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        let t = tensor(&[1, 2, 1, 1], &[1.0, 0.0]);
        let small = tensor(&[1, 1, 1, 1], &[1.0]);
        let probs = tensor(&[1], &[0.5]);
        assert!(mv_loss_with_grad(&t, &small, &t, &probs).is_err());
        let bad_probs = tensor(&[1], &[1.5]);
        assert!(mv_loss_with_grad(&t, &t, &t, &bad_probs).is_err());
    }
}

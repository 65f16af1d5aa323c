//! Center estimation with sample-contrastive loss.

use crate::error::{Error, Result};
use crate::rsg::ClassCenters;
use crate::tensor::{Arr, Var};
use ndarray::{Array2, IxDyn};

/// Center-clustering term plus pair-classification term.
///
/// Term 1 is the batch mean, over samples, of the gamma-weighted squared
/// distance (summed over all map positions) between the sample's feature map
/// and each upsampled center of its class. Term 2 is the mean binary
/// cross-entropy of the pair probabilities against the same-class targets.
/// Minimizing the sum clusters features onto centers and trains the pair
/// head; once `epoch > t_th` the pair term still contributes its value but is
/// cut out of the gradient.
#[allow(clippy::too_many_arguments)]
pub fn cesc_loss(
    feature_maps: &Var,
    labels: &[usize],
    centers: &ClassCenters,
    gamma: &Array2<f64>,
    pair_probs: &Var,
    pair_targets: &[f64],
    epoch: usize,
    t_th: usize,
) -> Result<Var> {
    let shape = feature_maps.shape();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "cesc_loss feature_maps",
            expected: vec![labels.len()],
            actual: shape,
        });
    }
    let b = labels.len();
    if b == 0 {
        return Err(Error::InvalidArgument {
            arg: "feature_maps",
            reason: "empty batch".into(),
        });
    }
    if gamma.nrows() != b || gamma.ncols() != centers.k() {
        return Err(Error::ShapeMismatch {
            context: "cesc_loss gamma",
            expected: vec![b, centers.k()],
            actual: vec![gamma.nrows(), gamma.ncols()],
        });
    }
    for (i, row) in gamma.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument {
                arg: "gamma",
                reason: format!("row {i} sums to {sum}, expected 1 within 1e-6"),
            });
        }
    }
    let p = pair_probs.shape();
    if p.len() != 1 || p[0] != pair_targets.len() {
        return Err(Error::ShapeMismatch {
            context: "cesc_loss pairs",
            expected: vec![pair_targets.len()],
            actual: p,
        });
    }
    if pair_probs
        .with_value(|v| v.iter().any(|&g| !(g > 0.0 && g < 1.0)))
    {
        return Err(Error::InvalidArgument {
            arg: "pair_probs",
            reason: "probabilities must lie strictly inside (0, 1)".into(),
        });
    }

    // Term 1, grouped by class so each class's centers enter the graph once.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); centers.num_classes()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= centers.num_classes() {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!("label {y} out of range"),
            });
        }
        by_class[y].push(i);
    }
    let mut cluster_sum: Option<Var> = None;
    for (class, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let maps = feature_maps
            .select_rows(rows)
            .reshape(&[n, 1, shape[1], shape[2], shape[3]]);
        let ups = centers
            .upsampled(class)
            .reshape(&[1, centers.k(), shape[1], shape[2], shape[3]]);
        let sq = maps.sub(&ups).square().sum_axes(&[2, 3, 4], false); // [n, K]
        let mut g = Arr::zeros(IxDyn(&[n, centers.k()]));
        for (r, &i) in rows.iter().enumerate() {
            for k in 0..centers.k() {
                g[[r, k]] = gamma[[i, k]];
            }
        }
        let weighted = sq.mul(&Var::constant(g)).sum_all();
        cluster_sum = Some(match cluster_sum {
            Some(acc) => acc.add(&weighted),
            None => weighted,
        });
    }
    let term1 = cluster_sum
        .expect("at least one class present")
        .mul_scalar(1.0 / b as f64);

    if pair_targets.is_empty() {
        return Ok(term1);
    }

    let targets = Var::constant(
        Arr::from_shape_vec(IxDyn(&[pair_targets.len()]), pair_targets.to_vec()).unwrap(),
    );
    let one_minus_t = targets.neg().add_scalar(1.0);
    let bce = targets
        .mul(&pair_probs.ln())
        .add(&one_minus_t.mul(&pair_probs.neg().add_scalar(1.0).ln()))
        .neg()
        .mean_all();
    // After the threshold the contrastive module stops updating: the value
    // stays in the report, the gradient does not.
    let term2 = if epoch > t_th { bce.detach() } else { bce };
    Ok(term1.add(&term2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centers_1class(k: usize, c: usize, h: usize, w: usize) -> ClassCenters {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ClassCenters::new(1, k, c, (h, w), 1, &mut rng).unwrap()
    }

    fn no_pairs() -> (Var, Vec<f64>) {
        (Var::constant(Arr::zeros(IxDyn(&[0]))), Vec::new())
    }

    #[test]
    fn exact_center_match_is_zero() {
        let centers = centers_1class(2, 1, 1, 1);
        let mut vals = Arr::zeros(IxDyn(&[2, 1, 1, 1]));
        vals[[0, 0, 0, 0]] = 0.7;
        vals[[1, 0, 0, 0]] = -0.3;
        centers.set_class(0, vals);

        let feature = Var::constant(Arr::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![0.7]).unwrap());
        let gamma = arr2(&[[1.0, 0.0]]);
        let probs = Var::constant(Arr::from_shape_vec(IxDyn(&[1]), vec![1.0 - 1e-9]).unwrap());
        let loss = cesc_loss(&feature, &[0], &centers, &gamma, &probs, &[1.0], 0, 10).unwrap();
        assert!(loss.scalar_value() < 1e-8);
    }

    #[test]
    fn distance_term_expands_to_squared_distance() {
        // K=1, gamma=[1]: term1 = d^2 summed over positions
        let centers = centers_1class(1, 2, 1, 2);
        centers.set_class(0, Arr::zeros(IxDyn(&[1, 2, 1, 2])));
        let feature = Var::constant(
            Arr::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let gamma = arr2(&[[1.0]]);
        let (probs, targets) = no_pairs();
        let loss = cesc_loss(&feature, &[0], &centers, &gamma, &probs, &targets, 0, 10).unwrap();
        assert!((loss.scalar_value() - 30.0).abs() < 1e-12); // 1+4+9+16
    }

    #[test]
    fn pair_gradient_freezes_after_threshold() {
        let centers = centers_1class(1, 1, 1, 1);
        let feature = Var::constant(Arr::zeros(IxDyn(&[2, 1, 1, 1])));
        let gamma = arr2(&[[1.0], [1.0]]);
        let probs = Var::param(Arr::from_shape_vec(IxDyn(&[1]), vec![0.7]).unwrap());

        let loss = cesc_loss(&feature, &[0, 0], &centers, &gamma, &probs, &[1.0], 5, 10).unwrap();
        loss.backward();
        assert!(probs.grad().unwrap()[[0]] != 0.0);

        probs.zero_grad();
        let loss = cesc_loss(&feature, &[0, 0], &centers, &gamma, &probs, &[1.0], 11, 10).unwrap();
        loss.backward();
        assert!(probs.grad().is_none() || probs.grad().unwrap()[[0]] == 0.0);
    }

    #[test]
    fn rejects_unnormalized_gamma_and_bad_probs() {
        let centers = centers_1class(2, 1, 1, 1);
        let feature = Var::constant(Arr::zeros(IxDyn(&[1, 1, 1, 1])));
        let bad_gamma = arr2(&[[0.6, 0.6]]);
        let (probs, targets) = no_pairs();
        assert!(cesc_loss(&feature, &[0], &centers, &bad_gamma, &probs, &targets, 0, 1).is_err());

        let gamma = arr2(&[[0.5, 0.5]]);
        let bad_probs = Var::constant(Arr::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap());
        assert!(cesc_loss(&feature, &[0], &centers, &gamma, &bad_probs, &[1.0], 0, 1).is_err());
    }
}

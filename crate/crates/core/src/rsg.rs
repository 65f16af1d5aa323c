//! Rare-class sample generation in feature space.
//!
//! Keeps a set of learnable centers per class, a symmetric same-class pair
//! head, and a 1x1-conv vector transform. After the phase threshold, the
//! displacement of a frequent-class feature from its nearest center is
//! transformed and added onto a rare-class feature to synthesize a new
//! rare-class sample at the insertion point of the backbone.

use crate::error::{Error, Result};
use crate::tensor::{conv2d, upsample_nearest, Arr, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How classes are split into rare and frequent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionRule {
    /// Rare = classes whose train count is below the geometric mean of counts.
    GeometricMean,
    /// Rare = the given fraction of classes with the smallest counts.
    TailFraction(f64),
}

/// Disjoint rare/frequent class split covering all classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RareFreqPartition {
    pub rare: Vec<usize>,
    pub frequent: Vec<usize>,
    pub rule: PartitionRule,
}

impl RareFreqPartition {
    pub fn is_rare(&self, class: usize) -> bool {
        self.rare.binary_search(&class).is_ok()
    }
}

pub fn partition_classes(counts: &[usize], rule: &PartitionRule) -> Result<RareFreqPartition> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "counts",
            reason: "must be non-empty".into(),
        });
    }
    let mut rare = Vec::new();
    match rule {
        PartitionRule::GeometricMean => {
            let log_mean = counts
                .iter()
                .map(|&n| (n.max(1) as f64).ln())
                .sum::<f64>()
                / counts.len() as f64;
            // compare in log space with a little slack so equal counts
            // never land on the rare side of their own mean
            for (j, &n) in counts.iter().enumerate() {
                if (n.max(1) as f64).ln() < log_mean - 1e-9 {
                    rare.push(j);
                }
            }
        }
        PartitionRule::TailFraction(f) => {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::InvalidArgument {
                    arg: "partition",
                    reason: format!("tail fraction must be in [0, 1], got {f}"),
                });
            }
            let take = (f * counts.len() as f64).floor() as usize;
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by_key(|&j| (counts[j], j));
            rare = order.into_iter().take(take).collect();
            rare.sort_unstable();
        }
    }
    let frequent = (0..counts.len())
        .filter(|j| rare.binary_search(j).is_err())
        .collect();
    Ok(RareFreqPartition {
        rare,
        frequent,
        rule: rule.clone(),
    })
}

/// Learnable per-class center sets.
///
/// Centers are stored at a (possibly coarser) spatial resolution and
/// upsampled with nearest-neighbor interpolation to match feature maps.
pub struct ClassCenters {
    centers: Vec<Var>, // per class: [K, C, Hc, Wc]
    k: usize,
    channels: usize,
    center_hw: (usize, usize),
    feature_hw: (usize, usize),
}

impl ClassCenters {
    pub fn new(
        num_classes: usize,
        k: usize,
        channels: usize,
        feature_hw: (usize, usize),
        downsample: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument {
                arg: "k",
                reason: "need at least one center per class".into(),
            });
        }
        if downsample == 0
            || feature_hw.0 % downsample != 0
            || feature_hw.1 % downsample != 0
        {
            return Err(Error::InvalidArgument {
                arg: "center_downsample",
                reason: format!(
                    "feature resolution {feature_hw:?} is not divisible by {downsample}"
                ),
            });
        }
        let center_hw = (feature_hw.0 / downsample, feature_hw.1 / downsample);
        let shape = [k, channels, center_hw.0, center_hw.1];
        let centers = (0..num_classes)
            .map(|_| {
                let data: Vec<f64> = (0..shape.iter().product::<usize>())
                    .map(|_| rng.random_range(-0.1..0.1))
                    .collect();
                Var::param(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
            })
            .collect();
        Ok(ClassCenters {
            centers,
            k,
            channels,
            center_hw,
            feature_hw,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn factors(&self) -> (usize, usize) {
        (
            self.feature_hw.0 / self.center_hw.0,
            self.feature_hw.1 / self.center_hw.1,
        )
    }

    /// Centers of `class` upsampled to feature resolution: `[K, C, H, W]`.
    /// Differentiable back to the stored centers.
    pub fn upsampled(&self, class: usize) -> Var {
        let (fh, fw) = self.factors();
        upsample_nearest(&self.centers[class], fh, fw)
    }

    /// Upsampled center values without graph history.
    pub fn upsampled_value(&self, class: usize) -> Arr {
        self.upsampled(class).value()
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        self.centers
            .iter()
            .enumerate()
            .map(|(c, v)| (format!("rsg.centers.{c}"), v.clone()))
            .collect()
    }

    pub fn set_class(&self, class: usize, value: Arr) {
        self.centers[class].set_value(value);
    }
}

/// Soft assignment of one sample to the centers of its class.
#[derive(Debug, Clone)]
pub struct CenterAssignment {
    /// Probability over the K centers; sums to 1.
    pub gamma: Vec<f64>,
    /// Argmax of gamma; ties resolved to the lowest index.
    pub nearest_index: usize,
}

/// Softmax over negative squared distances between the spatially pooled
/// feature map and each pooled upsampled center.
pub fn assign_centers(feature_map: &Arr, label: usize, centers: &ClassCenters) -> CenterAssignment {
    let pooled = pool_chw(feature_map);
    let ups = centers.upsampled_value(label); // [K, C, H, W]
    let k = centers.k();
    let mut neg_d = Vec::with_capacity(k);
    for i in 0..k {
        let center_pooled = pool_chw(&ups.index_axis(Axis(0), i).to_owned());
        let d: f64 = pooled
            .iter()
            .zip(center_pooled.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        neg_d.push(-d);
    }
    let max = neg_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_d.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let gamma: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    let mut nearest_index = 0;
    for (i, &g) in gamma.iter().enumerate() {
        if g > gamma[nearest_index] {
            nearest_index = i;
        }
    }
    CenterAssignment {
        gamma,
        nearest_index,
    }
}

/// Assignments for every sample of a `[B, C, H, W]` batch.
pub fn assign_centers_batch(
    features: &Arr,
    labels: &[usize],
    centers: &ClassCenters,
) -> Vec<CenterAssignment> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| assign_centers(&features.index_axis(Axis(0), i).to_owned(), y, centers))
        .collect()
}

/// Mean over the spatial dimensions of a `[C, H, W]` map.
fn pool_chw(map: &Arr) -> Vec<f64> {
    let shape = map.shape();
    assert_eq!(shape.len(), 3, "expected [C, H, W]");
    let spatial = (shape[1] * shape[2]) as f64;
    (0..shape[0])
        .map(|c| map.index_axis(Axis(0), c).sum() / spatial)
        .collect()
}

/// Feature displacement from the nearest class center.
#[derive(Debug, Clone)]
pub struct Displacement {
    pub fd: Arr,
    pub nearest_index: usize,
}

/// `feature - up(C_nearest)`, elementwise over the full map.
pub fn feature_displacement(
    feature_map: &Arr,
    label: usize,
    centers: &ClassCenters,
) -> Result<Displacement> {
    let assignment = assign_centers(feature_map, label, centers);
    let ups = centers.upsampled_value(label);
    let center = ups.index_axis(Axis(0), assignment.nearest_index).to_owned();
    if center.shape() != feature_map.shape() {
        return Err(Error::ShapeMismatch {
            context: "feature_displacement",
            expected: feature_map.shape().to_vec(),
            actual: center.shape().to_vec(),
        });
    }
    Ok(Displacement {
        fd: feature_map - &center,
        nearest_index: assignment.nearest_index,
    })
}

/// Symmetric same-class pair head over pooled features.
///
/// The two inputs enter as (a + b, |a - b|), so the output is exactly
/// order-invariant. The final layer starts at zero: every pair scores 0.5
/// until training moves it.
pub struct PairHead {
    w1: Var, // [2C, C]
    b1: Var, // [C]
    w2: Var, // [C, 1]
    b2: Var, // [1]
}

/// Open-interval clamp keeping probabilities strictly inside (0, 1).
pub const PROB_EPS: f64 = 1e-12;

impl PairHead {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (2 * channels) as f64).sqrt();
        let w1_data: Vec<f64> = (0..2 * channels * channels)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        PairHead {
            w1: Var::param(
                ArrayD::from_shape_vec(IxDyn(&[2 * channels, channels]), w1_data).unwrap(),
            ),
            b1: Var::param(ArrayD::zeros(IxDyn(&[channels]))),
            w2: Var::param(ArrayD::zeros(IxDyn(&[channels, 1]))),
            b2: Var::param(ArrayD::zeros(IxDyn(&[1]))),
        }
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        vec![
            ("rsg.pair_head.w1".into(), self.w1.clone()),
            ("rsg.pair_head.b1".into(), self.b1.clone()),
            ("rsg.pair_head.w2".into(), self.w2.clone()),
            ("rsg.pair_head.b2".into(), self.b2.clone()),
        ]
    }

    /// Same-class probabilities for pooled feature rows `a`, `b` of shape
    /// `[P, C]`. `train_head = false` detaches the head parameters so the
    /// gradient flows into the inputs only.
    pub fn forward(&self, a: &Var, b: &Var, train_head: bool) -> Var {
        let (w1, b1, w2, b2) = if train_head {
            (
                self.w1.clone(),
                self.b1.clone(),
                self.w2.clone(),
                self.b2.clone(),
            )
        } else {
            (
                self.w1.detach(),
                self.b1.detach(),
                self.w2.detach(),
                self.b2.detach(),
            )
        };
        let sum = a.add(b);
        let diff = a.sub(b).abs();
        let joint = join_cols(&sum, &diff);
        let hidden = joint.matmul(&w1).add(&b1).relu();
        let logit = hidden.matmul(&w2).add(&b2); // [P, 1]
        let p = logit.sigmoid();
        let n = p.shape()[0];
        p.reshape(&[n])
            .clamp_min(PROB_EPS)
            .clamp_max(1.0 - PROB_EPS)
    }
}

/// Probability that two pooled feature vectors belong to the same class.
pub fn pair_prob(feature_a: &Arr, feature_b: &Arr, head: &PairHead) -> f64 {
    let a = Var::constant(feature_a.clone().into_shape_with_order(IxDyn(&[1, feature_a.len()])).unwrap());
    let b = Var::constant(feature_b.clone().into_shape_with_order(IxDyn(&[1, feature_b.len()])).unwrap());
    head.forward(&a, &b, false).value()[[0]]
}

/// Column-wise concatenation of two `[P, C]` tensors into `[P, 2C]`.
fn join_cols(a: &Var, b: &Var) -> Var {
    let (pa, ca) = (a.shape()[0], a.shape()[1]);
    let stacked = Var::concat0(&[a.clone(), b.clone()]); // [2P, C]
    // rows 0..P are a, rows P..2P are b; interleave columns via reshape trick
    let idx: Vec<usize> = (0..pa).flat_map(|i| [i, i + pa]).collect();
    stacked.select_rows(&idx).reshape(&[pa, 2 * ca])
}

/// Learnable 1x1-conv transform applied to frequent-class displacements.
pub struct VectorTransform {
    weight: Var, // [C, C, 1, 1]
    bias: Var,   // [C]
}

impl VectorTransform {
    /// Identity initialization: generation starts as a plain displacement
    /// transfer and adapts through its own loss.
    pub fn identity(channels: usize) -> Self {
        let mut w = ArrayD::zeros(IxDyn(&[channels, channels, 1, 1]));
        for c in 0..channels {
            w[[c, c, 0, 0]] = 1.0;
        }
        VectorTransform {
            weight: Var::param(w),
            bias: Var::param(ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        vec![
            ("rsg.transform.weight".into(), self.weight.clone()),
            ("rsg.transform.bias".into(), self.bias.clone()),
        ]
    }

    /// Shape-preserving map over `[B, C, H, W]`.
    pub fn forward(&self, x: &Var) -> Var {
        conv2d(x, &self.weight, Some(&self.bias), 1, 0)
    }
}

/// Everything the vector-alignment loss needs about one generation step.
pub struct MvInputs {
    /// Transformed frequent displacements `[B_n, C, H, W]`; carries the
    /// transform's gradient.
    pub transformed_fd: Var,
    /// Rare-class displacements, constants.
    pub rare_fd: Arr,
    /// Untransformed frequent displacements, constants.
    pub freq_fd: Arr,
    /// Generated features for the pair head (transform-differentiable).
    pub gen_features: Var,
    /// Rare partner features, constants, same shape as `gen_features`.
    pub partner_features: Arr,
}

/// Result of running generation over one batch.
pub struct GeneratedBatch {
    /// `[B + B_n, C, H, W]`. The generated tail rows are
    /// `detach(T(fd_freq)) + rare_feature`, so downstream losses reach the
    /// encoder through the real rare features but never through the transform.
    pub features: Var,
    pub labels: Vec<usize>,
    pub b_n: usize,
    pub mv: Option<MvInputs>,
}

/// Synthesize new rare-class features from frequent-class displacements.
///
/// Inactive (returns the batch unchanged, `b_n == 0`) while
/// `epoch <= t_th`, and whenever the batch lacks rare or frequent samples.
pub fn generate_rare_samples(
    features: &Var,
    labels: &[usize],
    centers: &ClassCenters,
    transform: &VectorTransform,
    partition: &RareFreqPartition,
    epoch: usize,
    t_th: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedBatch> {
    let shape = features.shape();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "generate_rare_samples",
            expected: vec![labels.len()],
            actual: shape.clone(),
        });
    }
    let pass_through = |features: &Var| GeneratedBatch {
        features: features.clone(),
        labels: labels.to_vec(),
        b_n: 0,
        mv: None,
    };
    if epoch <= t_th {
        return Ok(pass_through(features));
    }
    let rare_rows: Vec<usize> = (0..labels.len())
        .filter(|&i| partition.is_rare(labels[i]))
        .collect();
    let freq_rows: Vec<usize> = (0..labels.len())
        .filter(|&i| !partition.is_rare(labels[i]))
        .collect();
    if rare_rows.is_empty() || freq_rows.is_empty() {
        return Ok(pass_through(features));
    }

    let values = features.value();
    let b_n = rare_rows.len();
    let map_shape = &shape[1..]; // [C, H, W]
    let mut freq_fd = ArrayD::zeros(IxDyn(&[b_n, map_shape[0], map_shape[1], map_shape[2]]));
    let mut rare_fd = freq_fd.clone();
    let mut partner_features = freq_fd.clone();

    for (n, &i) in rare_rows.iter().enumerate() {
        let j = freq_rows[rng.random_range(0..freq_rows.len())];
        let freq_map = values.index_axis(Axis(0), j).to_owned();
        let freq_disp = feature_displacement(&freq_map, labels[j], centers)?;
        let rare_map = values.index_axis(Axis(0), i).to_owned();
        let rare_disp = feature_displacement(&rare_map, labels[i], centers)?;
        freq_fd.index_axis_mut(Axis(0), n).assign(&freq_disp.fd);
        rare_fd.index_axis_mut(Axis(0), n).assign(&rare_disp.fd);
        partner_features.index_axis_mut(Axis(0), n).assign(&rare_map);
    }

    let transformed = transform.forward(&Var::constant(freq_fd.clone()));
    // Differentiable to the transform only; used by the alignment loss.
    let gen_features = transformed.add(&Var::constant(partner_features.clone()));
    // Downstream copy: transform blocked, rare features attached.
    let rare_attached = features.select_rows(&rare_rows);
    let gen_downstream = transformed.detach().add(&rare_attached);

    let mut labels_aug = labels.to_vec();
    labels_aug.extend(rare_rows.iter().map(|&i| labels[i]));
    Ok(GeneratedBatch {
        features: Var::concat0(&[features.clone(), gen_downstream]),
        labels: labels_aug,
        b_n,
        mv: Some(MvInputs {
            transformed_fd: transformed,
            rare_fd,
            freq_fd,
            gen_features,
            partner_features,
        }),
    })
}

/// Lloyd k-means on row vectors; deterministic in `rng`.
///
/// When there are fewer points than centers, points repeat with a small
/// jitter so the centers stay distinct.
pub fn kmeans(points: &Array2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    assert!(k >= 1 && n >= 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut centers = Array2::<f64>::zeros((k, dim));
    for c in 0..k {
        let src = order[c % n];
        let jitter = if c >= n { 1e-3 * (c / n) as f64 } else { 0.0 };
        for d in 0..dim {
            centers[[c, d]] = points[[src, d]] + jitter;
        }
    }
    if n <= k {
        return centers;
    }
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        for (i, row) in points.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d: f64 = row
                    .iter()
                    .zip(centers.row(c).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, row) in points.rows().into_iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            let mut dst = sums.row_mut(c);
            dst += &row;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster on a random point
                let src = rng.random_range(0..n);
                centers.row_mut(c).assign(&points.row(src));
            } else {
                let mut dst = centers.row_mut(c);
                dst.assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn map(values: &[f64], c: usize, h: usize, w: usize) -> Arr {
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), values.to_vec()).unwrap()
    }

    #[test]
    fn partition_geometric_mean_splits_tail() {
        let counts = [5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50];
        let p = partition_classes(&counts, &PartitionRule::GeometricMean).unwrap();
        assert_eq!(p.frequent, vec![0, 1, 2, 3, 4]);
        assert_eq!(p.rare, vec![5, 6, 7, 8, 9]);
        let max_rare = p.rare.iter().map(|&j| counts[j]).max().unwrap();
        let min_freq = p.frequent.iter().map(|&j| counts[j]).min().unwrap();
        assert!(max_rare <= min_freq);
    }

    #[test]
    fn partition_balanced_counts_has_no_rare() {
        let p = partition_classes(&[10, 10, 10], &PartitionRule::GeometricMean).unwrap();
        assert!(p.rare.is_empty());
        assert_eq!(p.frequent, vec![0, 1, 2]);
    }

    #[test]
    fn partition_tail_fraction() {
        let p = partition_classes(&[50, 40, 30, 20], &PartitionRule::TailFraction(0.5)).unwrap();
        assert_eq!(p.rare, vec![2, 3]);
    }

    #[test]
    fn assignment_single_center_is_trivial() {
        let mut r = rng();
        let centers = ClassCenters::new(2, 1, 2, (1, 1), 1, &mut r).unwrap();
        let a = assign_centers(&map(&[0.3, -0.4], 2, 1, 1), 0, &centers);
        assert_eq!(a.gamma, vec![1.0]);
        assert_eq!(a.nearest_index, 0);
    }

    #[test]
    fn assignment_concentrates_on_matching_center() {
        let mut r = rng();
        let centers = ClassCenters::new(1, 3, 2, (1, 1), 1, &mut r).unwrap();
        let mut vals = ArrayD::zeros(IxDyn(&[3, 2, 1, 1]));
        vals[[0, 0, 0, 0]] = 10.0;
        vals[[1, 0, 0, 0]] = -10.0;
        vals[[2, 0, 0, 0]] = 0.5;
        vals[[2, 1, 0, 0]] = 0.5;
        centers.set_class(0, vals);
        let a = assign_centers(&map(&[0.5, 0.5], 2, 1, 1), 0, &centers);
        assert_eq!(a.nearest_index, 2);
        assert!(a.gamma[2] > 0.99);
    }

    #[test]
    fn assignment_tie_takes_lowest_index() {
        let mut r = rng();
        let centers = ClassCenters::new(1, 2, 1, (1, 1), 1, &mut r).unwrap();
        let mut vals = ArrayD::zeros(IxDyn(&[2, 1, 1, 1]));
        vals[[0, 0, 0, 0]] = 1.0;
        vals[[1, 0, 0, 0]] = -1.0;
        centers.set_class(0, vals);
        let a = assign_centers(&map(&[0.0], 1, 1, 1), 0, &centers);
        assert!((a.gamma[0] - 0.5).abs() < 1e-12);
        assert_eq!(a.nearest_index, 0);
    }

    #[test]
    fn displacement_reconstructs_feature() {
        let mut r = rng();
        let centers = ClassCenters::new(1, 2, 1, (2, 2), 1, &mut r).unwrap();
        let mut vals = ArrayD::zeros(IxDyn(&[2, 1, 2, 2]));
        for (i, v) in [0.5, 1.0, -0.5, 2.0].iter().enumerate() {
            vals[[0, 0, i / 2, i % 2]] = *v;
        }
        centers.set_class(0, vals.clone());
        let feature = map(&[3.0, 0.0, 1.5, 2.5], 1, 2, 2);
        let disp = feature_displacement(&feature, 0, &centers).unwrap();
        let center = vals.index_axis(Axis(0), disp.nearest_index).to_owned();
        assert_eq!(&disp.fd + &center, feature);
    }

    #[test]
    fn displacement_identity_resolution_matches_subtraction() {
        let mut r = rng();
        let centers = ClassCenters::new(1, 1, 2, (1, 1), 1, &mut r).unwrap();
        let mut vals = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
        vals[[0, 0, 0, 0]] = 1.0;
        centers.set_class(0, vals);
        let disp = feature_displacement(&map(&[3.0, 0.0], 2, 1, 1), 0, &centers).unwrap();
        assert_eq!(disp.fd.as_slice().unwrap(), &[2.0, 0.0]);
    }

    #[test]
    fn pair_head_starts_at_half_and_is_symmetric() {
        let mut r = rng();
        let head = PairHead::new(3, &mut r);
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.2, -1.0, 0.7]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.4, 0.3, -0.2]).unwrap();
        assert_eq!(pair_prob(&a, &b, &head), 0.5);

        // push the head away from zero and confirm exact symmetry
        head.params()[1].1.set_value(
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 1.0, 1.0]).unwrap(),
        );
        head.params()[2].1.set_value(
            ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![0.3, -0.8, 0.5]).unwrap(),
        );
        let pab = pair_prob(&a, &b, &head);
        let pba = pair_prob(&b, &a, &head);
        assert_eq!(pab, pba);
        assert!(pab > 0.0 && pab < 1.0);
        assert_ne!(pab, 0.5);
    }

    #[test]
    fn generation_respects_phase_and_composes_features() {
        let mut r = rng();
        // channels=2, 1x1 maps; classes: 0 frequent, 1 rare
        let centers = ClassCenters::new(2, 1, 2, (1, 1), 1, &mut r).unwrap();
        let mut c0 = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
        c0[[0, 0, 0, 0]] = 1.0;
        centers.set_class(0, c0);
        centers.set_class(1, ArrayD::zeros(IxDyn(&[1, 2, 1, 1])));
        let transform = VectorTransform::identity(2);
        let partition = RareFreqPartition {
            rare: vec![1],
            frequent: vec![0],
            rule: PartitionRule::GeometricMean,
        };
        let features = Var::constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 1, 1]), vec![3.0, 0.0, 0.0, 5.0]).unwrap(),
        );
        let labels = vec![0usize, 1usize];

        // estimation phase: untouched
        let out = generate_rare_samples(
            &features, &labels, &centers, &transform, &partition, 3, 5, &mut r,
        )
        .unwrap();
        assert_eq!(out.b_n, 0);
        assert_eq!(out.features.shape(), vec![2, 2, 1, 1]);
        assert!(out.mv.is_none());

        // generation phase: freq (3,0) near center (1,0), rare (0,5)
        let out = generate_rare_samples(
            &features, &labels, &centers, &transform, &partition, 6, 5, &mut r,
        )
        .unwrap();
        assert_eq!(out.b_n, 1);
        assert_eq!(out.labels, vec![0, 1, 1]);
        let v = out.features.value();
        assert_eq!(v[[2, 0, 0, 0]], 2.0);
        assert_eq!(v[[2, 1, 0, 0]], 5.0);
        let mv = out.mv.unwrap();
        assert_eq!(mv.freq_fd.as_slice().unwrap(), &[2.0, 0.0]);
        assert_eq!(mv.rare_fd.as_slice().unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn generation_needs_both_partitions_in_batch() {
        let mut r = rng();
        let centers = ClassCenters::new(2, 1, 1, (1, 1), 1, &mut r).unwrap();
        let transform = VectorTransform::identity(1);
        let partition = RareFreqPartition {
            rare: vec![1],
            frequent: vec![0],
            rule: PartitionRule::GeometricMean,
        };
        let features = Var::constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![1.0, 2.0]).unwrap(),
        );
        let out = generate_rare_samples(
            &features,
            &[0, 0],
            &centers,
            &transform,
            &partition,
            10,
            5,
            &mut r,
        )
        .unwrap();
        assert_eq!(out.b_n, 0);
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut r = rng();
        let mut points = Array2::<f64>::zeros((40, 2));
        for i in 0..40 {
            let (cx, cy) = if i % 2 == 0 { (5.0, 5.0) } else { (-5.0, -5.0) };
            points[[i, 0]] = cx + 0.01 * (i as f64);
            points[[i, 1]] = cy - 0.01 * (i as f64);
        }
        let centers = kmeans(&points, 2, 10, &mut r);
        let mut xs: Vec<f64> = centers.column(0).to_vec();
        xs.sort_by(f64::total_cmp);
        assert!(xs[0] < -4.0 && xs[1] > 4.0);
    }
}

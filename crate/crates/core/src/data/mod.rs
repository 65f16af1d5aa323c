//! Long-tailed dataset construction, synthetic tasks, and batch iteration.

mod cifar;

pub use cifar::{load_cifar10, load_cifar10_test, load_cifar100, load_cifar100_test};

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Class-count profile of a long-tailed split under exponential imbalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    /// Samples in the largest class.
    pub n_max: usize,
    /// Imbalance factor: largest over smallest class size.
    pub beta: f64,
    /// Per-class sample counts, non-increasing.
    pub counts: Vec<usize>,
}

impl LongTailSpec {
    pub fn new(n_max: usize, beta: f64, num_classes: usize) -> Result<Self> {
        let counts = exponential_counts(n_max, beta, num_classes)?;
        Ok(LongTailSpec {
            num_classes,
            n_max,
            beta,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-class sizes n_j = floor(n_max * beta^(-j/(num_classes-1))).
///
/// Truncation toward zero is intentional; it is what makes the class-size
/// profile line up with published long-tail CIFAR splits.
pub fn exponential_counts(n_max: usize, beta: f64, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument {
            arg: "num_classes",
            reason: "must be at least 1".into(),
        });
    }
    if n_max == 0 {
        return Err(Error::InvalidArgument {
            arg: "n_max",
            reason: "must be at least 1".into(),
        });
    }
    if !(beta.is_finite() && beta >= 1.0) {
        return Err(Error::InvalidArgument {
            arg: "beta",
            reason: format!("imbalance factor must be a finite value >= 1, got {beta}"),
        });
    }
    if (n_max as f64 / beta).floor() < 1.0 {
        return Err(Error::InvalidArgument {
            arg: "n_max",
            reason: format!("floor(n_max / beta) = floor({n_max} / {beta}) < 1; the smallest class would be empty"),
        });
    }
    if num_classes == 1 {
        return Ok(vec![n_max]);
    }
    let denom = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|j| (n_max as f64 * beta.powf(-(j as f64) / denom)).floor() as usize)
        .collect())
}

/// Class groups by train-set size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    /// More than 100 samples.
    pub many: Vec<usize>,
    /// 20 to 100 samples, boundaries inclusive.
    pub medium: Vec<usize>,
    /// Fewer than 20 samples.
    pub few: Vec<usize>,
}

/// Partition classes into many/medium/few shot groups by sample count.
pub fn group_classes(counts: &[usize]) -> Result<ClassGroups> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "counts",
            reason: "must be non-empty".into(),
        });
    }
    let mut groups = ClassGroups {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (j, &n) in counts.iter().enumerate() {
        if n > 100 {
            groups.many.push(j);
        } else if n >= 20 {
            groups.medium.push(j);
        } else {
            groups.few.push(j);
        }
    }
    Ok(groups)
}

/// In-memory dataset: row-major features plus labels and a per-class index.
///
/// `input_shape` records the logical shape of one sample (e.g. `[8]` for a
/// vector task or `[3, 32, 32]` for CIFAR); `features` stores each sample
/// flattened to one row.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub per_class_index: Vec<Vec<usize>>,
    pub spec: LongTailSpec,
}

impl DatasetSplit {
    pub fn from_rows(
        features: Array2<f64>,
        labels: Vec<usize>,
        input_shape: Vec<usize>,
        spec: LongTailSpec,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "feature rows ({}) and labels ({}) disagree",
                features.nrows(),
                labels.len()
            )));
        }
        let dim: usize = input_shape.iter().product();
        if features.ncols() != dim {
            return Err(Error::Data(format!(
                "feature width {} does not match input shape {:?}",
                features.ncols(),
                input_shape
            )));
        }
        let mut per_class_index = vec![Vec::new(); spec.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= spec.num_classes {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    y, spec.num_classes
                )));
            }
            per_class_index[y].push(i);
        }
        Ok(DatasetSplit {
            features,
            labels,
            input_shape,
            per_class_index,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Actual per-class sizes (may differ from `spec.counts` for source sets).
    pub fn class_sizes(&self) -> Vec<usize> {
        self.per_class_index.iter().map(Vec::len).collect()
    }
}

/// Serialized description of a long-tail subsample: which source rows went
/// into each class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: LongTailSpec,
    pub seed: u64,
    pub per_class_ids: Vec<Vec<usize>>,
}

/// Down-sample `source` to the class sizes in `spec`, uniformly without
/// replacement, deterministic in `seed`. Class `j` of the source receives
/// `spec.counts[order[j]]` when a custom class order is given, otherwise
/// counts follow the original label order.
pub fn build_longtail_split(
    source: &DatasetSplit,
    spec: &LongTailSpec,
    seed: u64,
    class_order: Option<&[usize]>,
) -> Result<(DatasetSplit, SplitManifest)> {
    if source.num_classes() != spec.num_classes {
        return Err(Error::Data(format!(
            "source has {} classes, spec expects {}",
            source.num_classes(),
            spec.num_classes
        )));
    }
    if let Some(order) = class_order {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..spec.num_classes).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument {
                arg: "class_order",
                reason: "must be a permutation of 0..num_classes".into(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class_ids: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    // One shuffle per class in class order keeps the draw independent of
    // how many samples other classes contribute.
    for class in 0..spec.num_classes {
        let want = match class_order {
            Some(order) => spec.counts[order[class]],
            None => spec.counts[class],
        };
        let have = source.per_class_index[class].len();
        if have < want {
            return Err(Error::InsufficientSamples {
                class,
                available: have,
                required: want,
            });
        }
        let mut ids = source.per_class_index[class].clone();
        ids.shuffle(&mut rng);
        ids.truncate(want);
        ids.sort_unstable();
        per_class_ids[class] = ids;
    }

    let manifest = SplitManifest {
        spec: spec.clone(),
        seed,
        per_class_ids: per_class_ids.clone(),
    };
    let split = materialize_split(source, spec, &per_class_ids)?;
    Ok((split, manifest))
}

/// Rebuild a split from a manifest and its source dataset.
pub fn split_from_manifest(source: &DatasetSplit, manifest: &SplitManifest) -> Result<DatasetSplit> {
    materialize_split(source, &manifest.spec, &manifest.per_class_ids)
}

fn materialize_split(
    source: &DatasetSplit,
    spec: &LongTailSpec,
    per_class_ids: &[Vec<usize>],
) -> Result<DatasetSplit> {
    let mut rows: Vec<usize> = Vec::new();
    for ids in per_class_ids {
        rows.extend_from_slice(ids);
    }
    let features = source.features.select(ndarray::Axis(0), &rows);
    let labels: Vec<usize> = rows.iter().map(|&i| source.labels[i]).collect();
    DatasetSplit::from_rows(features, labels, source.input_shape.clone(), spec.clone())
}

/// Configuration for the synthetic Gaussian stand-in task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Radius of the circle the class means sit on.
    pub class_separation: f64,
    pub within_class_std: f64,
    pub spec: LongTailSpec,
    pub seed: u64,
    /// Balanced test-set size per class.
    pub test_per_class: usize,
}

impl SyntheticTaskConfig {
    fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument {
                arg: "feature_dim",
                reason: "must be at least 2".into(),
            });
        }
        if self.class_separation <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "class_separation",
                reason: "must be positive".into(),
            });
        }
        if self.within_class_std <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "within_class_std",
                reason: "must be positive".into(),
            });
        }
        if self.spec.num_classes != self.num_classes {
            return Err(Error::InvalidArgument {
                arg: "spec",
                reason: "spec.num_classes disagrees with num_classes".into(),
            });
        }
        if self.test_per_class == 0 {
            return Err(Error::InvalidArgument {
                arg: "test_per_class",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Class means laid out on a circle in the first two feature dimensions.
    /// Pairwise distinct for any class count.
    pub fn class_means(&self) -> Array2<f64> {
        let mut means = Array2::<f64>::zeros((self.num_classes, self.feature_dim));
        for j in 0..self.num_classes {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / self.num_classes as f64;
            means[[j, 0]] = self.class_separation * angle.cos();
            means[[j, 1]] = self.class_separation * angle.sin();
        }
        means
    }
}

/// Long-tailed train split plus a balanced test split, both Gaussian blobs
/// around fixed class means. Deterministic in `cfg.seed`.
pub fn synth_gaussian_task(cfg: &SyntheticTaskConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    cfg.validate()?;
    let means = cfg.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sample_class = |class: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * cfg.feature_dim);
        for _ in 0..n {
            for d in 0..cfg.feature_dim {
                let z: f64 = StandardNormal.sample(rng);
                out.push(means[[class, d]] + cfg.within_class_std * z);
            }
        }
        out
    };

    let build = |counts: &[usize], rng: &mut ChaCha8Rng| -> Result<DatasetSplit> {
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * cfg.feature_dim);
        let mut labels = Vec::with_capacity(total);
        for (class, &n) in counts.iter().enumerate() {
            data.extend(sample_class(class, n, rng));
            labels.extend(std::iter::repeat_n(class, n));
        }
        let features = Array2::from_shape_vec((total, cfg.feature_dim), data)
            .map_err(|e| Error::Data(e.to_string()))?;
        let spec = LongTailSpec {
            num_classes: cfg.num_classes,
            n_max: counts.iter().copied().max().unwrap_or(0),
            beta: counts.iter().copied().max().unwrap_or(1) as f64
                / counts.iter().copied().min().unwrap_or(1).max(1) as f64,
            counts: counts.to_vec(),
        };
        DatasetSplit::from_rows(features, labels, vec![cfg.feature_dim], spec)
    };

    let train = build(&cfg.spec.counts, &mut rng)?;
    let test_counts = vec![cfg.test_per_class; cfg.num_classes];
    let test = build(&test_counts, &mut rng)?;
    Ok((train, test))
}

/// One minibatch: flattened feature rows plus labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Epoch-seeded shuffling iterator over a split.
///
/// The permutation is a pure function of `(seed, epoch)`. A trailing batch
/// smaller than 2 is dropped: downstream losses need at least one pair.
pub struct BatchIterator<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(split: &'a DatasetSplit, batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidArgument {
                arg: "batch_size",
                reason: "must be at least 2".into(),
            });
        }
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        Ok(BatchIterator {
            split,
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.cursor;
        if remaining < 2 {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let rows = &self.order[self.cursor..self.cursor + take];
        self.cursor += take;
        let features = self.split.features.select(ndarray::Axis(0), rows);
        let labels = rows.iter().map(|&i| self.split.labels[i]).collect();
        Some(Batch { features, labels })
    }
}

/// Stable mix of a base seed with a stream index (splitmix64 step).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_reference_profile() {
        let counts = exponential_counts(5000, 100.0, 10).unwrap();
        assert_eq!(
            counts,
            vec![5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]
        );
    }

    #[test]
    fn counts_balanced_when_beta_is_one() {
        assert_eq!(exponential_counts(5000, 1.0, 10).unwrap(), vec![5000; 10]);
    }

    #[test]
    fn counts_small_case() {
        assert_eq!(exponential_counts(100, 4.0, 3).unwrap(), vec![100, 50, 25]);
    }

    #[test]
    fn counts_single_class() {
        assert_eq!(exponential_counts(7, 3.0, 1).unwrap(), vec![7]);
    }

    #[test]
    fn counts_rejects_bad_arguments() {
        assert!(exponential_counts(100, 0.5, 3).is_err());
        assert!(exponential_counts(3, 100.0, 3).is_err()); // floor(3/100) < 1
        assert!(exponential_counts(100, 2.0, 0).is_err());
    }

    #[test]
    fn grouping_thresholds() {
        let g = group_classes(&[150, 50, 10]).unwrap();
        assert_eq!(g.many, vec![0]);
        assert_eq!(g.medium, vec![1]);
        assert_eq!(g.few, vec![2]);

        // boundary values land in medium
        let g = group_classes(&[100, 20]).unwrap();
        assert!(g.many.is_empty());
        assert_eq!(g.medium, vec![0, 1]);
        assert!(g.few.is_empty());
    }

    #[test]
    fn grouping_reference_counts() {
        let counts = exponential_counts(5000, 100.0, 10).unwrap();
        let g = group_classes(&counts).unwrap();
        assert_eq!(g.many, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(g.medium, vec![8, 9]);
        assert!(g.few.is_empty());
    }

    fn balanced_source(num_classes: usize, per_class: usize, dim: usize) -> DatasetSplit {
        let total = num_classes * per_class;
        let features = Array2::from_shape_fn((total, dim), |(i, j)| (i * dim + j) as f64);
        let labels: Vec<usize> = (0..total).map(|i| i / per_class).collect();
        let spec = LongTailSpec::new(per_class, 1.0, num_classes).unwrap();
        DatasetSplit::from_rows(features, labels, vec![dim], spec).unwrap()
    }

    #[test]
    fn longtail_split_sizes_and_determinism() {
        let source = balanced_source(10, 5000, 4);
        let spec = LongTailSpec::new(5000, 100.0, 10).unwrap();
        let (split, manifest) = build_longtail_split(&source, &spec, 0, None).unwrap();
        assert_eq!(split.class_sizes(), spec.counts);
        let (split2, manifest2) = build_longtail_split(&source, &spec, 0, None).unwrap();
        assert_eq!(manifest.per_class_ids, manifest2.per_class_ids);
        assert_eq!(split.features, split2.features);

        let rebuilt = split_from_manifest(&source, &manifest).unwrap();
        assert_eq!(rebuilt.features, split.features);
    }

    #[test]
    fn longtail_split_beta_one_keeps_everything() {
        let source = balanced_source(3, 10, 2);
        let spec = LongTailSpec::new(10, 1.0, 3).unwrap();
        let (split, _) = build_longtail_split(&source, &spec, 1, None).unwrap();
        assert_eq!(split.len(), source.len());
    }

    #[test]
    fn longtail_split_insufficient_samples_names_class() {
        let source = balanced_source(3, 10, 2);
        let spec = LongTailSpec {
            num_classes: 3,
            n_max: 20,
            beta: 1.0,
            counts: vec![20, 20, 20],
        };
        let err = build_longtail_split(&source, &spec, 0, None).unwrap_err();
        match err {
            Error::InsufficientSamples { class, available, required } => {
                assert_eq!(class, 0);
                assert_eq!(available, 10);
                assert_eq!(required, 20);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn synthetic_task_is_deterministic_and_sized() {
        let spec = LongTailSpec::new(50, 10.0, 4).unwrap();
        let cfg = SyntheticTaskConfig {
            num_classes: 4,
            feature_dim: 3,
            class_separation: 5.0,
            within_class_std: 0.2,
            spec: spec.clone(),
            seed: 9,
            test_per_class: 20,
        };
        let (train_a, test_a) = synth_gaussian_task(&cfg).unwrap();
        let (train_b, test_b) = synth_gaussian_task(&cfg).unwrap();
        assert_eq!(train_a.features, train_b.features);
        assert_eq!(test_a.features, test_b.features);
        assert_eq!(train_a.class_sizes(), spec.counts);
        assert_eq!(test_a.class_sizes(), vec![20; 4]);
    }

    #[test]
    fn batch_iterator_covers_and_replays() {
        let source = balanced_source(3, 11, 2);
        let batches: Vec<Batch> = BatchIterator::new(&source, 8, 5, 2).unwrap().collect();
        let seen: usize = batches.iter().map(|b| b.labels.len()).sum();
        assert_eq!(seen, 33 - 1); // trailing singleton dropped

        let replay: Vec<Batch> = BatchIterator::new(&source, 8, 5, 2).unwrap().collect();
        assert_eq!(batches[0].labels, replay[0].labels);

        let other_epoch: Vec<Batch> = BatchIterator::new(&source, 8, 5, 3).unwrap().collect();
        assert_ne!(batches[0].labels, other_epoch[0].labels);
    }

    #[test]
    fn batch_iterator_keeps_partial_batches_of_two() {
        let source = balanced_source(2, 5, 2);
        let batches: Vec<Batch> = BatchIterator::new(&source, 4, 0, 0).unwrap().collect();
        let sizes: Vec<usize> = batches.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}

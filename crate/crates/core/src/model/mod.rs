//! End-to-end network: encoder with a generation point before the last
//! stage, a unit-norm projection branch, and a cosine classifier.

mod backbone;
mod layers;

pub use backbone::{MlpBackbone, ResnetBackbone};
pub use layers::{BatchNorm2d, Conv2dLayer, Linear};

use crate::error::{Error, Result};
use crate::rsg::{
    assign_centers_batch, generate_rare_samples, CenterAssignment, ClassCenters, MvInputs,
    PairHead, PartitionRule, RareFreqPartition, VectorTransform,
};
use crate::tensor::ops::l2_normalize_rows;
use crate::tensor::{Arr, Var};
use ndarray::{s, Array2, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Three-layer MLP for vector tasks.
    Mlp,
    /// Small 3-stage residual CNN for image tasks.
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneKind,
    /// Shape of one input sample: `[d]` for MLP, `[c, h, w]` for the CNN.
    pub input_shape: Vec<usize>,
    /// MLP hidden width (equals its feature dimension).
    pub hidden_dim: usize,
    /// CNN stage-1 width; the feature dimension is 4x this.
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
    pub rsg_enabled: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let expect_dims = match self.backbone {
            BackboneKind::Mlp => 1,
            BackboneKind::Resnet => 3,
        };
        if self.input_shape.len() != expect_dims || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} invalid for backbone {:?}",
                self.input_shape, self.backbone
            )));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("base_width", self.base_width),
            ("blocks_per_stage", self.blocks_per_stage),
            ("projection_dim", self.projection_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.backbone == BackboneKind::Resnet {
            let (h, w) = (self.input_shape[1], self.input_shape[2]);
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "CNN input spatial dims must be divisible by 4, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::Mlp => self.hidden_dim,
            BackboneKind::Resnet => 4 * self.base_width,
        }
    }

    /// Channel count at the generation point.
    pub fn mid_channels(&self) -> usize {
        match self.backbone {
            BackboneKind::Mlp => self.hidden_dim,
            BackboneKind::Resnet => 2 * self.base_width,
        }
    }

    /// Spatial resolution of the feature maps at the generation point.
    pub fn mid_hw(&self) -> (usize, usize) {
        match self.backbone {
            BackboneKind::Mlp => (1, 1),
            BackboneKind::Resnet => (self.input_shape[1] / 2, self.input_shape[2] / 2),
        }
    }
}

/// Generation-related settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsgConfig {
    pub k_centers: usize,
    pub partition: PartitionRule,
    /// Centers live at `mid_hw / center_downsample` and are upsampled back.
    pub center_downsample: usize,
    /// Per-class cap on feature maps collected for center initialization.
    pub collect_cap: usize,
}

impl Default for RsgConfig {
    fn default() -> Self {
        RsgConfig {
            k_centers: 3,
            partition: PartitionRule::GeometricMean,
            center_downsample: 1,
            collect_cap: 256,
        }
    }
}

/// Centers, pair head, and vector transform plus the class partition.
pub struct RsgModule {
    pub centers: ClassCenters,
    pub pair_head: PairHead,
    pub transform: VectorTransform,
    pub partition: RareFreqPartition,
    pub cfg: RsgConfig,
    /// Set once centers have been initialized from first-epoch features.
    pub init_done: Cell<bool>,
}

impl RsgModule {
    pub fn new(
        cfg: &RsgConfig,
        class_counts: &[usize],
        channels: usize,
        feature_hw: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let partition = crate::rsg::partition_classes(class_counts, &cfg.partition)?;
        Ok(RsgModule {
            centers: ClassCenters::new(
                class_counts.len(),
                cfg.k_centers,
                channels,
                feature_hw,
                cfg.center_downsample,
                rng,
            )?,
            pair_head: PairHead::new(channels, rng),
            transform: VectorTransform::identity(channels),
            partition,
            cfg: cfg.clone(),
            init_done: Cell::new(false),
        })
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = self.centers.params();
        out.extend(self.pair_head.params());
        out.extend(self.transform.params());
        out
    }
}

enum Backbone {
    Mlp(MlpBackbone),
    Resnet(ResnetBackbone),
}

/// RSG byproducts of a training forward pass.
pub struct RsgAux {
    pub b_n: usize,
    /// Soft center assignments for every (real + generated) sample.
    pub assignments: Vec<CenterAssignment>,
    /// Same-class probabilities for the sampled real pairs; `[P]`, may be empty.
    pub pair_probs: Var,
    pub pair_targets: Vec<f64>,
    /// Alignment-loss inputs plus the generated samples' pair probabilities.
    pub mv: Option<(MvInputs, Var)>,
}

pub struct ForwardOutput {
    /// Pre-insertion maps of the real batch: `[B, C, H, W]`.
    pub mid_features: Var,
    /// Input to the final stage, `[B + B_n, C, H, W]`.
    pub aug_features: Var,
    /// Post-pooling features `[B', F]`.
    pub features: Var,
    /// Unit-norm projections `[B', P]`.
    pub embeddings: Var,
    /// Cosine similarities `[B', num_classes]`, entries in [-1, 1].
    pub logits: Var,
    /// Labels including generated samples.
    pub labels: Vec<usize>,
    pub rsg: Option<RsgAux>,
}

pub struct Network {
    pub cfg: NetworkConfig,
    backbone: Backbone,
    proj1: Linear,
    proj2: Linear,
    classifier: Var, // [num_classes, F]
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = match cfg.backbone {
            BackboneKind::Mlp => {
                Backbone::Mlp(MlpBackbone::new(cfg.input_shape[0], cfg.hidden_dim, &mut rng))
            }
            BackboneKind::Resnet => Backbone::Resnet(ResnetBackbone::new(
                cfg.input_shape[0],
                cfg.base_width,
                cfg.blocks_per_stage,
                &mut rng,
            )),
        };
        let f = cfg.feature_dim();
        let proj1 = Linear::new("proj.l1", f, f, &mut rng);
        let proj2 = Linear::new("proj.l2", f, cfg.projection_dim, &mut rng);
        let bound = (6.0 / f as f64).sqrt();
        let cls_data: Vec<f64> = (0..cfg.num_classes * f)
            .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
            .collect();
        let classifier = Var::param(
            Arr::from_shape_vec(IxDyn(&[cfg.num_classes, f]), cls_data).unwrap(),
        );
        Ok(Network {
            cfg,
            backbone,
            proj1,
            proj2,
            classifier,
        })
    }

    /// Build a fresh RSG module matching this network's insertion geometry.
    pub fn build_rsg(
        &self,
        cfg: &RsgConfig,
        class_counts: &[usize],
        seed: u64,
    ) -> Result<RsgModule> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RsgModule::new(
            cfg,
            class_counts,
            self.cfg.mid_channels(),
            self.cfg.mid_hw(),
            &mut rng,
        )
    }

    fn input_to_var(&self, batch: &Array2<f64>) -> Result<Var> {
        let b = batch.nrows();
        let want: usize = self.cfg.input_shape.iter().product();
        if batch.ncols() != want {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: vec![want],
                actual: vec![batch.ncols()],
            });
        }
        let mut shape = vec![b];
        shape.extend(&self.cfg.input_shape);
        Ok(Var::constant(
            batch
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&shape))
                .unwrap(),
        ))
    }

    fn stage_pre(&self, x: &Var, training: bool) -> Var {
        match &self.backbone {
            Backbone::Mlp(m) => m.stage_pre(x),
            Backbone::Resnet(r) => r.stage_pre(x, training),
        }
    }

    fn stage_post(&self, mid: &Var, training: bool) -> Var {
        match &self.backbone {
            Backbone::Mlp(m) => m.stage_post(mid, training),
            Backbone::Resnet(r) => r.stage_post(mid, training),
        }
    }

    fn heads(&self, features: &Var) -> Result<(Var, Var)> {
        let embeddings = l2_normalize_rows(
            &self.proj2.forward(&self.proj1.forward(features).relu()),
            NORM_EPS,
        );
        let feat_n = l2_normalize_rows(features, NORM_EPS);
        let w_n = l2_normalize_rows(&self.classifier, NORM_EPS);
        let logits = feat_n.matmul(&w_n.transpose2());
        ensure_finite(&embeddings, "projection head")?;
        ensure_finite(&logits, "cosine classifier")?;
        Ok((embeddings, logits))
    }

    /// Training pass with optional generation after the phase threshold.
    pub fn forward_train(
        &self,
        batch: &Array2<f64>,
        labels: &[usize],
        epoch: usize,
        t_th: usize,
        rsg: Option<&RsgModule>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        if batch.nrows() < 2 {
            return Err(Error::InvalidArgument {
                arg: "batch",
                reason: format!("training batches need at least 2 samples, got {}", batch.nrows()),
            });
        }
        if batch.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "forward_train",
                expected: vec![labels.len()],
                actual: vec![batch.nrows()],
            });
        }
        let x = self.input_to_var(batch)?;
        let mid = self.stage_pre(&x, true);
        ensure_finite(&mid, "backbone stages before the insertion point")?;

        let rsg = if self.cfg.rsg_enabled { rsg } else { None };
        let (aug_features, aug_labels, b_n, mv_inputs) = match rsg {
            Some(module) => {
                let generated = generate_rare_samples(
                    &mid,
                    labels,
                    &module.centers,
                    &module.transform,
                    &module.partition,
                    epoch,
                    t_th,
                    rng,
                )?;
                (
                    generated.features,
                    generated.labels,
                    generated.b_n,
                    generated.mv,
                )
            }
            None => (mid.clone(), labels.to_vec(), 0, None),
        };

        let features = self.stage_post(&aug_features, true);
        ensure_finite(&features, "backbone final stage")?;
        let (embeddings, logits) = self.heads(&features)?;

        let rsg_aux = match rsg {
            Some(module) => {
                let assignments =
                    assign_centers_batch(&aug_features.value(), &aug_labels, &module.centers);
                // sample-contrastive pairs over the real batch
                let pooled = mid.mean_axes(&[2, 3], false); // [B, C]
                let mut order: Vec<usize> = (0..labels.len()).collect();
                order.shuffle(rng);
                let num_pairs = labels.len() / 2;
                let (mut lhs, mut rhs, mut targets) = (
                    Vec::with_capacity(num_pairs),
                    Vec::with_capacity(num_pairs),
                    Vec::with_capacity(num_pairs),
                );
                for p in 0..num_pairs {
                    let (i, j) = (order[2 * p], order[2 * p + 1]);
                    lhs.push(i);
                    rhs.push(j);
                    targets.push(f64::from(u8::from(labels[i] == labels[j])));
                }
                let pair_probs = if num_pairs > 0 {
                    module.pair_head.forward(
                        &pooled.select_rows(&lhs),
                        &pooled.select_rows(&rhs),
                        true,
                    )
                } else {
                    Var::constant(Arr::zeros(IxDyn(&[0])))
                };
                let mv = mv_inputs.map(|inputs| {
                    let gen_pooled = inputs.gen_features.mean_axes(&[2, 3], false);
                    let partner_pooled = Var::constant(inputs.partner_features.clone())
                        .mean_axes(&[2, 3], false);
                    let probs =
                        module
                            .pair_head
                            .forward(&gen_pooled, &partner_pooled, false);
                    (inputs, probs)
                });
                Some(RsgAux {
                    b_n,
                    assignments,
                    pair_probs,
                    pair_targets: targets,
                    mv,
                })
            }
            None => None,
        };

        Ok(ForwardOutput {
            mid_features: mid,
            aug_features,
            features,
            embeddings,
            logits,
            labels: aug_labels,
            rsg: rsg_aux,
        })
    }

    /// Deterministic inference pass: no generation, running batch-norm
    /// statistics, returns logits and post-pooling features.
    pub fn forward_eval(&self, batch: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.input_to_var(batch)?;
        let mid = self.stage_pre(&x, false);
        ensure_finite(&mid, "backbone stages before the insertion point")?;
        let features = self.stage_post(&mid, false);
        ensure_finite(&features, "backbone final stage")?;
        let (_, logits) = self.heads(&features)?;
        let to2 = |v: Arr| v.into_dimensionality::<ndarray::Ix2>().expect("2-d");
        Ok((to2(logits.value()), to2(features.value())))
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = match &self.backbone {
            Backbone::Mlp(m) => m.params(),
            Backbone::Resnet(r) => r.params(),
        };
        out.extend(self.proj1.params());
        out.extend(self.proj2.params());
        out.push(("classifier.weight".into(), self.classifier.clone()));
        out
    }

    /// Non-parameter state (batch-norm running statistics).
    pub fn aux_state(&self) -> Vec<(String, Arr)> {
        match &self.backbone {
            Backbone::Mlp(_) => Vec::new(),
            Backbone::Resnet(r) => r.bn_state(),
        }
    }

    pub fn load_aux_state(&self, name: &str, value: &Arr) -> bool {
        match &self.backbone {
            Backbone::Mlp(_) => false,
            Backbone::Resnet(r) => r.load_bn_state(name, value),
        }
    }
}

fn ensure_finite(v: &Var, location: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location.to_string(),
        })
    }
}

/// Argmax per row.
pub fn predictions_from_logits(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Convenience slice view over the first `b` rows of a feature matrix.
pub fn head_rows(features: &Array2<f64>, b: usize) -> Array2<f64> {
    features.slice(s![..b, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config(rsg: bool) -> NetworkConfig {
        NetworkConfig {
            backbone: BackboneKind::Mlp,
            input_shape: vec![4],
            hidden_dim: 8,
            base_width: 4,
            blocks_per_stage: 1,
            projection_dim: 6,
            num_classes: 3,
            rsg_enabled: rsg,
        }
    }

    fn batch(b: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |(i, j)| ((i * d + j) as f64) * 0.1 - 0.3)
    }

    #[test]
    fn forward_train_shapes_without_rsg() {
        let net = Network::new(mlp_config(false), 0).unwrap();
        let x = batch(5, 4);
        let labels = vec![0, 1, 2, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward_train(&x, &labels, 0, 10, None, &mut rng).unwrap();
        assert_eq!(out.logits.shape(), vec![5, 3]);
        assert_eq!(out.embeddings.shape(), vec![5, 6]);
        assert_eq!(out.labels, labels);
        assert!(out.rsg.is_none());

        // embeddings unit norm, logits within [-1, 1]
        let e = out.embeddings.value();
        for i in 0..5 {
            let n: f64 = (0..6).map(|j| e[[i, j]] * e[[i, j]]).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(out.logits.value().iter().all(|&v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)));
    }

    #[test]
    fn generation_grows_batch_after_threshold() {
        let net = Network::new(mlp_config(true), 1).unwrap();
        let rsg = net.build_rsg(&RsgConfig::default(), &[100, 50, 4], 2).unwrap();
        assert_eq!(rsg.partition.rare, vec![2]);
        let x = batch(6, 4);
        let labels = vec![0, 1, 2, 0, 2, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let out = net
            .forward_train(&x, &labels, 2, 5, Some(&rsg), &mut rng)
            .unwrap();
        assert_eq!(out.rsg.as_ref().unwrap().b_n, 0);
        assert_eq!(out.logits.shape(), vec![6, 3]);

        let out = net
            .forward_train(&x, &labels, 6, 5, Some(&rsg), &mut rng)
            .unwrap();
        let aux = out.rsg.as_ref().unwrap();
        assert_eq!(aux.b_n, 2); // two rare samples, each generated once
        assert_eq!(out.logits.shape(), vec![8, 3]);
        assert_eq!(&out.labels[6..], &[2, 2]);
        assert_eq!(aux.assignments.len(), 8);
        let (_, probs) = aux.mv.as_ref().unwrap();
        assert_eq!(probs.shape(), vec![2]);
    }

    #[test]
    fn eval_is_deterministic_and_permutes_with_batch() {
        let net = Network::new(mlp_config(false), 7).unwrap();
        let x = batch(4, 4);
        let (l1, _) = net.forward_eval(&x).unwrap();
        let (l2, _) = net.forward_eval(&x).unwrap();
        assert_eq!(l1, l2);

        let perm = [2usize, 0, 3, 1];
        let xp = x.select(ndarray::Axis(0), &perm);
        let (lp, _) = net.forward_eval(&xp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(lp[[k, j]], l1[[i, j]]);
            }
        }
    }
}

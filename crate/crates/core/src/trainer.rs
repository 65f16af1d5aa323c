//! Training loop: schedule, optimizer, phase switching, checkpoints.

use crate::data::{mix_seed, BatchIterator, ClassGroups, DatasetSplit};
use crate::error::{Error, Result};
use crate::loss::{
    cesc_loss, ldam_loss, ldam_margins, mv_loss, scl_loss, total_loss, LossParts, LossWeights,
    MarginTable, SclConfig,
};
use crate::metrics::{grouped_accuracy, intra_class_distance, top1_accuracy, MetricsReport};
use crate::model::{predictions_from_logits, Network, NetworkConfig, RsgConfig, RsgModule};
use crate::rsg::kmeans;
use crate::tensor::{Arr, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Warmup, then cosine annealing to zero, with multiplicative step decays
    /// layered on top at the milestones.
    Cosine,
    /// Warmup, then piecewise-constant decay at the milestones.
    Step,
    /// Warmup, then cosine annealing restarted from the base rate at each
    /// milestone.
    CosineWarmRestarts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdamConfig {
    pub max_m: f64,
    pub s: f64,
}

impl Default for LdamConfig {
    fn default() -> Self {
        LdamConfig { max_m: 0.5, s: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// The full weighted objective.
    Composite,
    /// Plain softmax cross-entropy on the scaled cosine logits (baseline).
    CrossEntropy,
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub step_milestones: Vec<usize>,
    #[serde(default = "TrainConfig::default_step_factor")]
    pub step_factor: f64,
    /// Epoch threshold: generation and the alignment loss activate strictly
    /// after this epoch.
    pub t_th: usize,
    #[serde(default, rename = "loss")]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub scl: SclConfig,
    #[serde(default)]
    pub ldam: LdamConfig,
    pub seed: u64,
    #[serde(default = "TrainConfig::default_loss_mode")]
    pub loss_mode: LossMode,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Save a checkpoint every N epochs; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_weight_decay() -> f64 {
        5e-4
    }
    fn default_step_factor() -> f64 {
        0.1
    }
    fn default_loss_mode() -> LossMode {
        LossMode::Composite
    }

    /// CIFAR-style recipe: warm up to 0.1 over 5 epochs, cosine annealing,
    /// step decays at 160 and 180 over 200 epochs, threshold at 100.
    pub fn cifar_default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            schedule: Schedule::Cosine,
            step_milestones: vec![160, 180],
            step_factor: 0.1,
            t_th: 100,
            loss_weights: LossWeights::default(),
            scl: SclConfig::default(),
            ldam: LdamConfig::default(),
            seed: 0,
            loss_mode: LossMode::Composite,
            eval_batch_size: 256,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.t_th > self.epochs {
            return Err(Error::Config(format!(
                "t_th ({}) must not exceed epochs ({})",
                self.t_th, self.epochs
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(
                "warmup_epochs must not exceed epochs".into(),
            ));
        }
        for w in self.step_milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "step_milestones must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.step_milestones.last() {
            if last >= self.epochs && self.epochs > 0 {
                return Err(Error::Config("step_milestones must be < epochs".into()));
            }
        }
        if !(self.step_factor > 0.0 && self.step_factor <= 1.0) {
            return Err(Error::Config("step_factor must lie in (0, 1]".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.scl.validate()?;
        Ok(())
    }
}

/// Learning rate at `epoch`: linear per-epoch warmup to `base_lr`, then the
/// configured decay. A pure function of `(epoch, cfg)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let passed = cfg.step_milestones.iter().filter(|&&m| epoch >= m).count();
    let cosine = |start: usize, end: usize| -> f64 {
        let span = end.saturating_sub(start).max(1) as f64;
        let t = (epoch - start) as f64;
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
    };
    match cfg.schedule {
        Schedule::Step => cfg.base_lr * cfg.step_factor.powi(passed as i32),
        Schedule::Cosine => {
            cosine(cfg.warmup_epochs, cfg.epochs) * cfg.step_factor.powi(passed as i32)
        }
        Schedule::CosineWarmRestarts => {
            let mut start = cfg.warmup_epochs;
            let mut end = cfg.epochs;
            for &m in &cfg.step_milestones {
                if epoch >= m {
                    start = m;
                } else {
                    end = m;
                    break;
                }
            }
            cosine(start, end)
        }
    }
}

/// SGD with classic momentum and L2 weight decay folded into the gradient:
/// `v = m*v + (g + wd*w); w -= lr*v`.
pub struct SgdMomentum {
    params: Vec<(String, Var)>,
    velocity: Vec<Arr>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(params: Vec<(String, Var)>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        SgdMomentum {
            params,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, lr: f64) {
        for ((_, p), v) in self.params.iter().zip(&mut self.velocity) {
            let w = p.value();
            let mut g = p
                .grad()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&p.shape())));
            if self.weight_decay != 0.0 {
                g = g + &w * self.weight_decay;
            }
            *v = &*v * self.momentum + &g;
            p.set_value(w - &*v * lr);
        }
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn velocity_state(&self) -> Vec<(String, Arr)> {
        self.params
            .iter()
            .zip(&self.velocity)
            .map(|((name, _), v)| (name.clone(), v.clone()))
            .collect()
    }

    pub fn load_velocity(&mut self, name: &str, value: Arr) -> bool {
        for ((n, _), v) in self.params.iter().zip(&mut self.velocity) {
            if n == name {
                *v = value;
                return true;
            }
        }
        false
    }
}

/// Aggregated statistics of one training epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub lr: f64,
    pub loss_scl: f64,
    pub loss_ldam: f64,
    pub loss_cesc: f64,
    pub loss_mv: f64,
    pub loss_total: f64,
    /// Generated samples over the whole epoch.
    pub b_n: usize,
}

/// One row of the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_scl: f64,
    pub loss_ldam: f64,
    pub loss_cesc: f64,
    pub loss_mv: f64,
    pub loss_total: f64,
    pub b_n: usize,
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub avg_icd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn from_arr(name: &str, arr: &Arr) -> Self {
        NamedArray {
            name: name.to_string(),
            shape: arr.shape().to_vec(),
            data: arr.iter().copied().collect(),
        }
    }

    fn to_arr(&self) -> Result<Arr> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", self.name)))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state: weights, generation state, optimizer momentum,
/// epoch counter, and the configs that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub next_epoch: usize,
    pub network: NetworkConfig,
    pub rsg: Option<RsgConfig>,
    pub rsg_init_done: bool,
    pub train: TrainConfig,
    pub class_counts: Vec<usize>,
    pub params: Vec<NamedArray>,
    pub aux_state: Vec<NamedArray>,
    pub velocity: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Feature maps collected during the first epoch for center initialization.
struct CenterCollector {
    per_class: Vec<Vec<Arr>>,
    cap: usize,
}

impl CenterCollector {
    fn new(num_classes: usize, cap: usize) -> Self {
        CenterCollector {
            per_class: vec![Vec::new(); num_classes],
            cap,
        }
    }

    fn absorb(&mut self, maps: &Arr, labels: &[usize]) {
        for (i, &y) in labels.iter().enumerate() {
            if self.per_class[y].len() < self.cap {
                self.per_class[y].push(maps.index_axis(Axis(0), i).to_owned());
            }
        }
    }
}

pub struct Trainer {
    pub network: Network,
    pub rsg: Option<RsgModule>,
    pub margins: MarginTable,
    pub cfg: TrainConfig,
    pub train_split: DatasetSplit,
    pub test_split: DatasetSplit,
    pub groups: ClassGroups,
    opt: SgdMomentum,
    next_epoch: usize,
    collector: Option<CenterCollector>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(
        network_cfg: NetworkConfig,
        rsg_cfg: Option<RsgConfig>,
        train_cfg: TrainConfig,
        train_split: DatasetSplit,
        test_split: DatasetSplit,
    ) -> Result<Self> {
        train_cfg.validate()?;
        network_cfg.validate()?;
        let counts = train_split.spec.counts.clone();
        let network = Network::new(network_cfg, mix_seed(train_cfg.seed, 11))?;
        let rsg = match (&rsg_cfg, network.cfg.rsg_enabled) {
            (Some(cfg), true) => {
                Some(network.build_rsg(cfg, &counts, mix_seed(train_cfg.seed, 12))?)
            }
            _ => None,
        };
        let margins = match train_cfg.loss_mode {
            LossMode::Composite => ldam_margins(&counts, train_cfg.ldam.max_m, train_cfg.ldam.s)?,
            LossMode::CrossEntropy => MarginTable::zeros(counts.len(), train_cfg.ldam.s),
        };
        let groups = crate::data::group_classes(&counts)?;
        let mut params = network.named_params();
        if let Some(rsg) = &rsg {
            params.extend(rsg.params());
        }
        let opt = SgdMomentum::new(params, train_cfg.momentum, train_cfg.weight_decay);
        let collector = rsg
            .as_ref()
            .map(|m| CenterCollector::new(counts.len(), m.cfg.collect_cap));
        Ok(Trainer {
            network,
            rsg,
            margins,
            cfg: train_cfg,
            train_split,
            test_split,
            groups,
            opt,
            next_epoch: 0,
            collector,
            history: Vec::new(),
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// One pass over the training split.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let lr = lr_schedule(epoch, &self.cfg);
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0x0f00_0000 + epoch as u64));
        let batches =
            BatchIterator::new(&self.train_split, self.cfg.batch_size, self.cfg.seed, epoch)?;

        let mut sums = EpochStats {
            lr,
            loss_scl: 0.0,
            loss_ldam: 0.0,
            loss_cesc: 0.0,
            loss_mv: 0.0,
            loss_total: 0.0,
            b_n: 0,
        };
        let mut samples = 0usize;

        for (batch_idx, batch) in batches.enumerate() {
            let out = self.network.forward_train(
                &batch.features,
                &batch.labels,
                epoch,
                self.cfg.t_th,
                self.rsg.as_ref(),
                &mut rng,
            )?;

            if let Some(collector) = &mut self.collector {
                if epoch == 0 {
                    collector.absorb(&out.mid_features.value(), &batch.labels);
                }
            }

            let (total, scl_v, ldam_v, cesc_v, mv_v, b_n) = match self.cfg.loss_mode {
                LossMode::CrossEntropy => {
                    let ce = ldam_loss(&out.logits, &out.labels, &self.margins)?;
                    let v = ce.scalar_value();
                    (ce, 0.0, v, 0.0, 0.0, 0)
                }
                LossMode::Composite => {
                    let scl = scl_loss(&out.embeddings, &out.labels, &self.cfg.scl)?;
                    let ldam = ldam_loss(&out.logits, &out.labels, &self.margins)?;
                    let (cesc, mv, b_n) = match (&out.rsg, &self.rsg) {
                        (Some(aux), Some(module)) => {
                            let k = module.centers.k();
                            let mut gamma = Array2::<f64>::zeros((out.labels.len(), k));
                            for (i, a) in aux.assignments.iter().enumerate() {
                                for (j, &g) in a.gamma.iter().enumerate() {
                                    gamma[[i, j]] = g;
                                }
                            }
                            let cesc = cesc_loss(
                                &out.aug_features,
                                &out.labels,
                                &module.centers,
                                &gamma,
                                &aux.pair_probs,
                                &aux.pair_targets,
                                epoch,
                                self.cfg.t_th,
                            )?;
                            let mv = match &aux.mv {
                                Some((inputs, probs)) => Some(mv_loss(
                                    &inputs.transformed_fd,
                                    &inputs.rare_fd,
                                    &inputs.freq_fd,
                                    probs,
                                )?),
                                None => None,
                            };
                            (cesc, mv, aux.b_n)
                        }
                        _ => (Var::scalar(0.0), None, 0),
                    };
                    let scl_v = scl.scalar_value();
                    let ldam_v = ldam.scalar_value();
                    let cesc_v = cesc.scalar_value();
                    let mv_v = mv.as_ref().map_or(0.0, Var::scalar_value);
                    let parts = LossParts { scl, ldam, cesc, mv };
                    let total = total_loss(&parts, &self.cfg.loss_weights, epoch, self.cfg.t_th)?;
                    (total, scl_v, ldam_v, cesc_v, mv_v, b_n)
                }
            };

            let total_v = total.scalar_value();
            if !total_v.is_finite() {
                return Err(Error::NonFinite {
                    location: format!(
                        "total loss at epoch {epoch}, batch {batch_idx} \
                         (scl={scl_v}, ldam={ldam_v}, cesc={cesc_v}, mv={mv_v})"
                    ),
                });
            }

            self.opt.zero_grads();
            total.backward();
            self.opt.step(lr);

            let n = batch.labels.len() as f64;
            sums.loss_scl += scl_v * n;
            sums.loss_ldam += ldam_v * n;
            sums.loss_cesc += cesc_v * n;
            sums.loss_mv += mv_v * n;
            sums.loss_total += total_v * n;
            sums.b_n += b_n;
            samples += batch.labels.len();
        }

        if samples > 0 {
            let inv = 1.0 / samples as f64;
            sums.loss_scl *= inv;
            sums.loss_ldam *= inv;
            sums.loss_cesc *= inv;
            sums.loss_mv *= inv;
            sums.loss_total *= inv;
        }

        // centers start from a clustering of the first epoch's features
        if epoch == 0 {
            self.init_centers_from_collected();
        }

        Ok(sums)
    }

    fn init_centers_from_collected(&mut self) {
        let Some(collector) = self.collector.take() else {
            return;
        };
        let Some(module) = &self.rsg else { return };
        if module.init_done.get() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0xCE27));
        let k = module.centers.k();
        let down = module.cfg.center_downsample;
        for (class, maps) in collector.per_class.iter().enumerate() {
            if maps.is_empty() {
                continue;
            }
            let pooled: Vec<Arr> = maps.iter().map(|m| avg_pool_map(m, down)).collect();
            let dim: usize = pooled[0].len();
            let mut rows = Array2::<f64>::zeros((pooled.len(), dim));
            for (i, m) in pooled.iter().enumerate() {
                for (j, &v) in m.iter().enumerate() {
                    rows[[i, j]] = v;
                }
            }
            let centers = kmeans(&rows, k, 10, &mut rng);
            let mut shape = vec![k];
            shape.extend(pooled[0].shape());
            let flat: Vec<f64> = centers.iter().copied().collect();
            module
                .centers
                .set_class(class, ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap());
        }
        module.init_done.set(true);
    }

    /// Evaluate on the held-out split: accuracy, group accuracy, and
    /// intra-class distance over post-pooling features.
    pub fn evaluate(&self, epoch: usize) -> Result<MetricsReport> {
        let (preds, features) = self.eval_predictions(&self.test_split)?;
        let overall = top1_accuracy(&preds, &self.test_split.labels)?;
        let group = grouped_accuracy(&preds, &self.test_split.labels, &self.groups)?;
        let (per_class_icd, avg_icd) = intra_class_distance(
            &features,
            &self.test_split.labels,
            self.test_split.num_classes(),
        )?;
        Ok(MetricsReport {
            epoch,
            overall_top1: overall,
            group_top1: group,
            per_class_icd,
            avg_icd,
        })
    }

    /// Predictions and post-pooling features for an arbitrary split.
    pub fn eval_predictions(&self, split: &DatasetSplit) -> Result<(Vec<usize>, Array2<f64>)> {
        let n = split.len();
        if n == 0 {
            return Err(Error::Data("empty evaluation split".into()));
        }
        let mut preds = Vec::with_capacity(n);
        let mut chunks: Vec<Array2<f64>> = Vec::new();
        let mut cursor = 0;
        while cursor < n {
            let take = self.cfg.eval_batch_size.min(n - cursor);
            let rows: Vec<usize> = (cursor..cursor + take).collect();
            let x = split.features.select(Axis(0), &rows);
            let (logits, feats) = self.network.forward_eval(&x)?;
            preds.extend(predictions_from_logits(&logits));
            chunks.push(feats);
            cursor += take;
        }
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).expect("feature concat");
        Ok((preds, features))
    }

    /// Run the remaining epochs, evaluating after each and checkpointing
    /// according to `checkpoint_every`. `out_dir`, when given, receives
    /// `checkpoint.json` (latest) and `checkpoint_best.json` (highest
    /// overall accuracy).
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<MetricsReport> {
        let save = |trainer: &Trainer, name: &str| -> Result<()> {
            if let Some(dir) = out_dir {
                trainer.checkpoint().save(&dir.join(name))?;
            }
            Ok(())
        };
        let mut best: Option<f64> = None;
        for epoch in self.next_epoch..self.cfg.epochs {
            let stats = self.train_epoch(epoch)?;
            let report = self.evaluate(epoch)?;
            self.history.push(EpochRecord {
                epoch,
                lr: stats.lr,
                loss_scl: stats.loss_scl,
                loss_ldam: stats.loss_ldam,
                loss_cesc: stats.loss_cesc,
                loss_mv: stats.loss_mv,
                loss_total: stats.loss_total,
                b_n: stats.b_n,
                overall: report.overall_top1,
                many: report.group_top1.many,
                medium: report.group_top1.medium,
                few: report.group_top1.few,
                avg_icd: report.avg_icd,
            });
            self.next_epoch = epoch + 1;
            if best.is_none_or(|acc| report.overall_top1 > acc) {
                best = Some(report.overall_top1);
                save(self, "checkpoint_best.json")?;
            }
            if self.cfg.checkpoint_every > 0 && (epoch + 1) % self.cfg.checkpoint_every == 0 {
                save(self, "checkpoint.json")?;
            }
        }
        save(self, "checkpoint.json")?;
        if best.is_none() {
            // zero-epoch run still leaves a loadable best checkpoint
            save(self, "checkpoint_best.json")?;
        }
        self.evaluate(self.next_epoch.saturating_sub(1))
    }

    /// Snapshot the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .opt
            .params()
            .iter()
            .map(|(name, p)| NamedArray::from_arr(name, &p.value()))
            .collect();
        let aux_state = self
            .network
            .aux_state()
            .iter()
            .map(|(name, v)| NamedArray::from_arr(name, v))
            .collect();
        let velocity = self
            .opt
            .velocity_state()
            .iter()
            .map(|(name, v)| NamedArray::from_arr(name, v))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            next_epoch: self.next_epoch,
            network: self.network.cfg.clone(),
            rsg: self.rsg.as_ref().map(|m| m.cfg.clone()),
            rsg_init_done: self.rsg.as_ref().is_some_and(|m| m.init_done.get()),
            train: self.cfg.clone(),
            class_counts: self.train_split.spec.counts.clone(),
            params,
            aux_state,
            velocity,
        }
    }

    /// Restore weights, optimizer state, and the epoch counter.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.network != self.network.cfg {
            return Err(Error::Checkpoint(
                "network configuration does not match the checkpoint".into(),
            ));
        }
        if ckpt.class_counts != self.train_split.spec.counts {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on class counts {:?}, dataset has {:?}",
                ckpt.class_counts, self.train_split.spec.counts
            )));
        }
        let by_name: std::collections::BTreeMap<&str, &Var> = self
            .opt
            .params()
            .iter()
            .map(|(n, p)| (n.as_str(), p))
            .collect();
        if ckpt.params.len() != by_name.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                by_name.len()
            )));
        }
        for named in &ckpt.params {
            let Some(p) = by_name.get(named.name.as_str()) else {
                return Err(Error::Checkpoint(format!(
                    "unknown parameter `{}` in checkpoint",
                    named.name
                )));
            };
            let arr = named.to_arr()?;
            if arr.shape() != p.shape().as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    named.name,
                    arr.shape(),
                    p.shape()
                )));
            }
            p.set_value(arr);
        }
        for named in &ckpt.aux_state {
            let arr = named.to_arr()?;
            if !self.network.load_aux_state(&named.name, &arr) {
                return Err(Error::Checkpoint(format!(
                    "unknown auxiliary state `{}`",
                    named.name
                )));
            }
        }
        for named in &ckpt.velocity {
            let arr = named.to_arr()?;
            if !self.opt.load_velocity(&named.name, arr) {
                return Err(Error::Checkpoint(format!(
                    "unknown optimizer state `{}`",
                    named.name
                )));
            }
        }
        if let Some(module) = &self.rsg {
            module.init_done.set(ckpt.rsg_init_done);
            if ckpt.rsg_init_done {
                self.collector = None;
            }
        }
        self.next_epoch = ckpt.next_epoch;
        Ok(())
    }
}

/// Average-pool the spatial dims of a `[C, H, W]` map by an integer factor.
fn avg_pool_map(map: &Arr, factor: usize) -> Arr {
    if factor == 1 {
        return map.clone();
    }
    let shape = map.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
    let norm = (factor * factor) as f64;
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += map[[ci, oy * factor + dy, ox * factor + dx]];
                    }
                }
                out[[ci, oy, ox]] = s / norm;
            }
        }
    }
    out
}

/// Write the training history as CSV.
pub fn write_history_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from(
        "epoch,lr,loss_scl,loss_ldam,loss_cesc,loss_mv,loss_total,b_n,overall,many,medium,few,avg_icd\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.loss_scl,
            r.loss_ldam,
            r.loss_cesc,
            r.loss_mv,
            r.loss_total,
            r.b_n,
            r.overall,
            opt(r.many),
            opt(r.medium),
            opt(r.few),
            r.avg_icd,
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::cifar_default()
        }
    }

    #[test]
    fn warmup_ends_exactly_at_base_lr() {
        let c = cfg(200);
        assert_eq!(lr_schedule(4, &c), 0.1);
        assert!((lr_schedule(0, &c) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn cosine_starts_at_base_lr() {
        let c = cfg(200);
        assert_eq!(lr_schedule(5, &c), 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn milestones_multiply_cosine() {
        let c = cfg(200);
        let at =
            |e: usize| 0.1 * 0.5 * (1.0 + (std::f64::consts::PI * (e - 5) as f64 / 195.0).cos());
        assert!((lr_schedule(150, &c) - at(150)).abs() < 1e-15);
        assert!((lr_schedule(165, &c) - at(165) * 0.1).abs() < 1e-15);
        assert!((lr_schedule(190, &c) - at(190) * 0.01).abs() < 1e-15);
    }

    #[test]
    fn lr_stays_positive_through_last_epoch() {
        let c = cfg(200);
        for e in 0..200 {
            assert!(lr_schedule(e, &c) > 0.0, "lr zero at epoch {e}");
        }
    }

    #[test]
    fn step_schedule_is_piecewise_constant() {
        let mut c = cfg(200);
        c.schedule = Schedule::Step;
        assert_eq!(lr_schedule(100, &c), 0.1);
        assert!((lr_schedule(160, &c) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(185, &c) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn warm_restarts_return_to_base() {
        let mut c = cfg(200);
        c.schedule = Schedule::CosineWarmRestarts;
        assert_eq!(lr_schedule(160, &c), 0.1);
        assert_eq!(lr_schedule(180, &c), 0.1);
        assert!(lr_schedule(179, &c) < 0.01);
    }

    #[test]
    fn validate_rejects_bad_milestones() {
        let mut c = cfg(200);
        c.step_milestones = vec![180, 160];
        assert!(c.validate().is_err());
        c.step_milestones = vec![160, 250];
        assert!(c.validate().is_err());
        c.step_milestones = vec![160, 180];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn sgd_momentum_applies_weight_decay_without_gradient() {
        let p = Var::param(ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let mut opt = SgdMomentum::new(vec![("p".into(), p.clone())], 0.9, 0.1);
        opt.step(1.0);
        // v = 0.1 * w; w' = w - v = 0.9 * w
        let v = p.value();
        assert!((v[[0]] - 0.9).abs() < 1e-15);
        assert!((v[[1]] + 1.8).abs() < 1e-15);
    }
}

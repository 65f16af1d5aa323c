//! Experiment configuration: one TOML file drives dataset construction,
//! model assembly, training, and the weight search.

use crate::data::{
    build_longtail_split, load_cifar10, load_cifar100, synth_gaussian_task, DatasetSplit,
    LongTailSpec, SplitManifest, SyntheticTaskConfig,
};
use crate::error::{Error, Result};
use crate::ga::GaConfig;
use crate::model::{BackboneKind, NetworkConfig, RsgConfig};
use crate::trainer::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "synthetic")]
    Synthetic,
    #[serde(rename = "cifar10-lt")]
    Cifar10Lt,
    #[serde(rename = "cifar100-lt")]
    Cifar100Lt,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Synthetic => "synthetic",
            TaskKind::Cifar10Lt => "cifar10-lt",
            TaskKind::Cifar100Lt => "cifar100-lt",
        }
    }
}

fn default_feature_dim() -> usize {
    8
}
fn default_separation() -> f64 {
    1.0
}
fn default_within_std() -> f64 {
    0.35
}
fn default_test_per_class() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    /// Largest class size of the long-tail split.
    pub n_max: usize,
    /// Imbalance factor.
    pub beta: f64,
    pub seed: u64,
    /// Synthetic task: feature dimensionality.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Synthetic task: radius of the circle holding the class means.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Synthetic task: per-class standard deviation.
    #[serde(default = "default_within_std")]
    pub within_class_std: f64,
    /// Synthetic task: balanced test size per class.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// CIFAR tasks: directory with the standard binary files.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Optional permutation assigning spec counts to source classes; label
    /// order when absent.
    #[serde(default)]
    pub class_order: Option<Vec<usize>>,
}

fn default_hidden_dim() -> usize {
    64
}
fn default_base_width() -> usize {
    16
}
fn default_blocks() -> usize {
    2
}
fn default_projection_dim() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default = "default_true")]
    pub rsg_enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaFitnessKind {
    /// Short fine-tunes from a pretrained checkpoint (the real protocol).
    Finetune,
    /// Planted quadratic objective; no training involved.
    Surrogate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaSection {
    #[serde(flatten)]
    pub ga: GaConfig,
    pub fitness: GaFitnessKind,
    #[serde(default)]
    pub pretrained_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub rsg: RsgConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub ga: Option<GaSection>,
}

impl ExperimentConfig {
    /// Parse and validate; unknown keys are rejected by the parser.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_classes == 0 {
            return Err(Error::Config("data.num_classes must be positive".into()));
        }
        // fails early when the count profile itself is infeasible
        LongTailSpec::new(self.data.n_max, self.data.beta, self.data.num_classes)?;
        self.train.validate()?;
        self.network_config().validate()?;
        if let Some(order) = &self.data.class_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.data.num_classes).collect::<Vec<_>>() {
                return Err(Error::Config(
                    "data.class_order must be a permutation of 0..num_classes".into(),
                ));
            }
        }
        if self.task != TaskKind::Synthetic && self.data.data_dir.is_none() {
            return Err(Error::Config(format!(
                "task {} requires data.data_dir",
                self.task.name()
            )));
        }
        if let Some(ga) = &self.ga {
            ga.ga.validate()?;
            if ga.fitness == GaFitnessKind::Finetune && ga.pretrained_checkpoint.is_none() {
                return Err(Error::Config(
                    "ga.fitness = \"finetune\" requires ga.pretrained_checkpoint".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn longtail_spec(&self) -> Result<LongTailSpec> {
        LongTailSpec::new(self.data.n_max, self.data.beta, self.data.num_classes)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let input_shape = match self.task {
            TaskKind::Synthetic => vec![self.data.feature_dim],
            TaskKind::Cifar10Lt | TaskKind::Cifar100Lt => vec![3, 32, 32],
        };
        NetworkConfig {
            backbone: self.model.backbone,
            input_shape,
            hidden_dim: self.model.hidden_dim,
            base_width: self.model.base_width,
            blocks_per_stage: self.model.blocks_per_stage,
            projection_dim: self.model.projection_dim,
            num_classes: self.data.num_classes,
            rsg_enabled: self.model.rsg_enabled,
        }
    }

    fn synthetic_config(&self, spec: LongTailSpec) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            num_classes: self.data.num_classes,
            feature_dim: self.data.feature_dim,
            class_separation: self.data.class_separation,
            within_class_std: self.data.within_class_std,
            spec,
            seed: self.data.seed,
            test_per_class: self.data.test_per_class,
        }
    }

    /// The balanced source dataset a long-tail split is carved from
    /// (CIFAR tasks only; the synthetic task samples its split directly).
    pub fn load_source(&self) -> Result<DatasetSplit> {
        let dir = self.data.data_dir.as_deref().ok_or_else(|| {
            Error::Config("data.data_dir is required for CIFAR tasks".into())
        })?;
        match self.task {
            TaskKind::Cifar10Lt => load_cifar10(dir),
            TaskKind::Cifar100Lt => load_cifar100(dir),
            TaskKind::Synthetic => Err(Error::Config(
                "the synthetic task has no on-disk source".into(),
            )),
        }
    }

    /// Long-tail train split plus balanced test split, with the manifest
    /// when the split was carved from a source dataset.
    pub fn build_datasets(&self) -> Result<(DatasetSplit, DatasetSplit, Option<SplitManifest>)> {
        let spec = self.longtail_spec()?;
        match self.task {
            TaskKind::Synthetic => {
                let (train, test) = synth_gaussian_task(&self.synthetic_config(spec))?;
                Ok((train, test, None))
            }
            TaskKind::Cifar10Lt | TaskKind::Cifar100Lt => {
                let source = self.load_source()?;
                let (train, manifest) = build_longtail_split(
                    &source,
                    &spec,
                    self.data.seed,
                    self.data.class_order.as_deref(),
                )?;
                let dir = self.data.data_dir.as_deref().unwrap();
                let test = match self.task {
                    TaskKind::Cifar10Lt => crate::data::load_cifar10_test(dir)?,
                    _ => crate::data::load_cifar100_test(dir)?,
                };
                Ok((train, test, Some(manifest)))
            }
        }
    }

    /// Assemble a ready-to-run trainer.
    pub fn build_trainer(&self) -> Result<Trainer> {
        let (train_split, test_split, _) = self.build_datasets()?;
        Trainer::new(
            self.network_config(),
            self.model.rsg_enabled.then(|| self.rsg.clone()),
            self.train.clone(),
            train_split,
            test_split,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMOKE_TOML: &str = r#"
task = "synthetic"

[data]
num_classes = 10
n_max = 500
beta = 100.0
seed = 7
feature_dim = 8

[model]
backbone = "mlp"
hidden_dim = 32

[train]
epochs = 4
batch_size = 32
base_lr = 0.05
warmup_epochs = 1
schedule = "cosine"
t_th = 2
seed = 3
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg: ExperimentConfig = toml::from_str(SMOKE_TOML).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.task, TaskKind::Synthetic);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert!(cfg.model.rsg_enabled);
        assert_eq!(cfg.rsg.k_centers, 3);
        // the paper-style defaults fill in
        assert_eq!(cfg.train.loss_weights.eta, 1e-5);
        assert_eq!(cfg.train.scl.tau, 0.1);
        assert_eq!(cfg.train.ldam.max_m, 0.5);
        assert_eq!(cfg.train.ldam.s, 30.0);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = SMOKE_TOML.replace("[train]", "not_a_key = 1\n[train]");
        let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(&text);
        assert!(parsed.is_err());
    }

    #[test]
    fn rejects_infeasible_counts() {
        let text = SMOKE_TOML.replace("n_max = 500", "n_max = 50");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err()); // floor(50/100) < 1
    }

    #[test]
    fn cifar_task_requires_data_dir() {
        let text = SMOKE_TOML
            .replace("task = \"synthetic\"", "task = \"cifar10-lt\"")
            .replace("backbone = \"mlp\"", "backbone = \"resnet\"");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn builds_synthetic_datasets() {
        let cfg: ExperimentConfig = toml::from_str(SMOKE_TOML).unwrap();
        let (train, test, manifest) = cfg.build_datasets().unwrap();
        assert_eq!(
            train.class_sizes(),
            vec![500, 299, 179, 107, 64, 38, 23, 13, 8, 5]
        );
        assert_eq!(test.class_sizes(), vec![100; 10]);
        assert!(manifest.is_none());
    }
}

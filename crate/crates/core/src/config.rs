//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_classification, gen_synthetic_sequence, gen_toy_regression, load_csv, DatasetSplits};
use crate::error::{Error, Result};
use crate::layers::Family;
use crate::model::{Arch, ModelSpec};
use crate::predict::TaskKind;
use crate::train::{LossKind, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    ToyRegression {
        #[serde(default = "default_toy_train")]
        n_train: usize,
        #[serde(default = "default_toy_test")]
        n_test: usize,
        #[serde(default = "default_toy_grid")]
        n_grid: usize,
    },
    SyntheticClassification {
        n: usize,
        d: usize,
        separation: f64,
    },
    SyntheticSequence {
        n: usize,
        steps: usize,
        #[serde(default)]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        target_column: String,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        #[serde(default)]
        classification: bool,
    },
}

fn default_toy_train() -> usize {
    1024
}
fn default_toy_test() -> usize {
    2048
}
fn default_toy_grid() -> usize {
    201
}
fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::SyntheticClassification { .. } => TaskKind::Classification,
            TaskSpec::Csv { classification: true, .. } => TaskKind::Classification,
            _ => TaskKind::Regression,
        }
    }

    /// Relative CSV paths resolve against `base`.
    pub fn generate(&self, seed: u64, base: &Path) -> Result<DatasetSplits> {
        match self {
            TaskSpec::ToyRegression { n_train, n_test, n_grid } => gen_toy_regression(*n_train, *n_test, *n_grid, seed),
            TaskSpec::SyntheticClassification { n, d, separation } => {
                gen_synthetic_classification(*n, *d, *separation, seed)
            }
            TaskSpec::SyntheticSequence { n, steps, noise_std } => gen_synthetic_sequence(*n, *steps, *noise_std, seed),
            TaskSpec::Csv {
                path,
                target_column,
                fractions,
                classification,
            } => load_csv(&base.join(path), target_column, *fractions, *classification, seed),
        }
    }
}

/// Which inputs count as out-of-distribution in `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodSource {
    /// The generator's shifted split.
    #[default]
    Split,
    /// Evaluation grid points inside `in_domain` versus inside `ood`.
    Grid { in_domain: [f64; 2], ood: [f64; 2] },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Keeps only these report keys; empty keeps everything.
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub ood_source: OodSource,
    #[serde(default = "default_retention")]
    pub retention: Vec<f64>,
    #[serde(default = "default_level")]
    pub interval_level: f64,
}

fn default_samples() -> usize {
    100
}
fn default_retention() -> Vec<f64> {
    vec![1.0, 0.9, 0.8]
}
fn default_level() -> f64 {
    0.95
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            samples: default_samples(),
            metrics: Vec::new(),
            ood_source: OodSource::default(),
            retention: default_retention(),
            interval_level: default_level(),
        }
    }
}

/// Reduced-budget rank sweep. Every low-rank layer takes the grid rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub ablation: Option<AblationSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates; `base` is used to resolve relative paths.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate(base)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Canonical serialization hashed into manifests.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        if !(self.eval.interval_level > 0.0 && self.eval.interval_level < 1.0) {
            return Err(Error::Config("eval.interval_level must lie in (0, 1)".into()));
        }
        if self.eval.retention.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config("eval.retention levels must lie in (0, 1]".into()));
        }
        let kind = self.task.kind();
        let loss_ok = matches!(
            (kind, self.train.loss),
            (TaskKind::Classification, LossKind::SoftmaxCe | LossKind::BinaryCe)
                | (TaskKind::Regression, LossKind::GaussianNll { .. })
        );
        if !loss_ok {
            return Err(Error::Config(format!("loss {:?} does not fit a {kind:?} task", self.train.loss)));
        }
        if matches!(self.task, TaskSpec::SyntheticSequence { .. }) != (self.model.arch == Arch::Lstm) {
            return Err(Error::Config("sequence tasks need the lstm architecture and vice versa".into()));
        }
        if let TaskSpec::Csv { path, .. } = &self.task {
            if !base.join(path).is_file() {
                return Err(Error::Config(format!("data file {} does not exist", base.join(path).display())));
            }
        }
        if let Some(ab) = &self.ablation {
            if ab.ranks.is_empty() {
                return Err(Error::Config("ablation.ranks must not be empty".into()));
            }
            for &r in &ab.ranks {
                self.with_rank(r)?.model.validate()?;
            }
        }
        Ok(())
    }

    /// Copy with every low-rank layer set to rank `r`.
    pub fn with_rank(&self, r: usize) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        let mut found = false;
        for f in c.model.layers.iter_mut() {
            if let Family::LowRank { rank } = f {
                *rank = r;
                found = true;
            }
        }
        if !found {
            return Err(Error::Config("rank override needs at least one low_rank layer".into()));
        }
        Ok(c)
    }
}

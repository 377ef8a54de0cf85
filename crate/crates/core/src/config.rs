//! Experiment configuration (JSON). Unknown fields are rejected and every
//! range violation is reported with the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::Strategy;
use crate::data::{self, BlobSpec, DataError, Dataset};
use crate::ensemble::{EnsembleMode, RetrainMode};
use crate::nn::Activation;
use crate::ssl::AugmentationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { field, .. } | ConfigError::Validation { field, .. } => Some(field),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub ssl: Option<SslConfig>,
    #[serde(default)]
    pub oracle: OracleMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_strategy() -> Strategy {
    Strategy::Vr
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default = "one")]
        std: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    4.0
}

impl DatasetConfig {
    /// Relative MNIST directories are resolved against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset, DataError> {
        match self {
            DatasetConfig::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = match base {
                    Some(base) if dir.is_relative() => base.join(dir),
                    _ => dir.clone(),
                };
                Ok(data::load_mnist_dir(&dir)?.truncated(*train_limit, *test_limit))
            }
            DatasetConfig::Blobs {
                classes,
                dim,
                per_class,
                std,
                separation,
                seed,
            } => data::make_blobs(&BlobSpec::spread(*classes, *dim, *separation, *std, *per_class, *seed)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    #[default]
    Ensemble,
    McDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default)]
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub mode: EnsembleMode,
    /// Defaults to the Xavier-scaled Gaussian of the network.
    pub prior: Option<PriorConfig>,
    pub anchor_coefficient: f64,
    pub resample_prior_each_round: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub uncertainty: Uncertainty,
    pub mc_passes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            activation: Activation::Relu,
            dropout_rate: 0.0,
            ensemble_size: 5,
            mode: EnsembleMode::SharedPriorJoint,
            prior: None,
            anchor_coefficient: 1e-4,
            resample_prior_each_round: true,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            uncertainty: Uncertainty::Ensemble,
            mc_passes: 25,
        }
    }
}

/// A count of samples, or a fraction of the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, pool: usize) -> usize {
        match self {
            Budget::Count(n) => n,
            Budget::Fraction(f) => (f * pool as f64).round() as usize,
        }
    }

    fn validate(self, field: &str) -> Result<(), ConfigError> {
        match self {
            Budget::Count(0) => Err(ConfigError::invalid(field, "budget must be positive")),
            Budget::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(ConfigError::invalid(
                field,
                format!("budget must be a positive count or a fraction in (0, 1], got {f}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub initial_budget: Budget,
    pub step_budget: Budget,
    pub rounds: usize,
    pub retrain_mode: RetrainMode,
    pub incremental_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_budget: Budget::Count(200),
            step_budget: Budget::Count(100),
            rounds: 8,
            retrain_mode: RetrainMode::Scratch,
            incremental_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub head_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of training-pool images used for pretraining (all if unset).
    pub pool_size: Option<usize>,
    pub learning_rate: f64,
    pub ridge: f64,
    pub augment: AugmentationConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![1024],
            embedding_dim: 512,
            projection_hidden: 128,
            projection_dim: 16,
            head_hidden: vec![256],
            epochs: 20,
            batch_size: 128,
            pool_size: Some(5000),
            learning_rate: 1e-3,
            ridge: 1e-5,
            augment: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Simulated,
    Live,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                dim,
                per_class,
                std,
                ..
            } => {
                if *classes < 2 {
                    return Err(ConfigError::invalid("dataset.classes", "at least 2 classes required"));
                }
                if *dim == 0 {
                    return Err(ConfigError::invalid("dataset.dim", "must be positive"));
                }
                if *per_class < 5 {
                    return Err(ConfigError::invalid("dataset.per_class", "at least 5 samples per class"));
                }
                if !(*std >= 0.0) {
                    return Err(ConfigError::invalid("dataset.std", "must be nonnegative"));
                }
            }
            DatasetConfig::Mnist { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) {
                    return Err(ConfigError::invalid("dataset.train_limit", "must be positive"));
                }
                if *test_limit == Some(0) {
                    return Err(ConfigError::invalid("dataset.test_limit", "must be positive"));
                }
            }
        }
        let m = &self.model;
        if m.hidden.iter().any(|&w| w == 0) {
            return Err(ConfigError::invalid("model.hidden", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return Err(ConfigError::invalid("model.dropout_rate", "must lie in [0, 1)"));
        }
        if m.ensemble_size == 0 {
            return Err(ConfigError::invalid("model.ensemble_size", "must be at least 1"));
        }
        if let Some(p) = m.prior {
            if !(p.variance > 0.0 && p.variance.is_finite()) {
                return Err(ConfigError::invalid("model.prior.variance", "must be positive"));
            }
            if !p.mean.is_finite() {
                return Err(ConfigError::invalid("model.prior.mean", "must be finite"));
            }
        }
        if !(m.anchor_coefficient >= 0.0 && m.anchor_coefficient.is_finite()) {
            return Err(ConfigError::invalid("model.anchor_coefficient", "must be nonnegative"));
        }
        if m.epochs == 0 {
            return Err(ConfigError::invalid("model.epochs", "must be positive"));
        }
        if m.batch_size == 0 {
            return Err(ConfigError::invalid("model.batch_size", "must be positive"));
        }
        if !(m.learning_rate > 0.0 && m.learning_rate.is_finite()) {
            return Err(ConfigError::invalid("model.learning_rate", "must be positive"));
        }
        if m.uncertainty == Uncertainty::McDropout {
            if m.mc_passes == 0 {
                return Err(ConfigError::invalid("model.mc_passes", "must be at least 1"));
            }
            if m.dropout_rate == 0.0 {
                return Err(ConfigError::invalid(
                    "model.dropout_rate",
                    "MC-dropout uncertainty needs a positive dropout rate",
                ));
            }
        }
        let s = &self.schedule;
        s.initial_budget.validate("schedule.initial_budget")?;
        s.step_budget.validate("schedule.step_budget")?;
        if s.retrain_mode == RetrainMode::Incremental && s.incremental_epochs == 0 {
            return Err(ConfigError::invalid("schedule.incremental_epochs", "must be positive"));
        }
        if let Some(ssl) = &self.ssl {
            if ssl.encoder_hidden.iter().any(|&w| w == 0) || ssl.embedding_dim == 0 {
                return Err(ConfigError::invalid("ssl.encoder_hidden", "layer widths must be positive"));
            }
            if ssl.projection_hidden == 0 {
                return Err(ConfigError::invalid("ssl.projection_hidden", "must be positive"));
            }
            if ssl.projection_dim < 2 {
                return Err(ConfigError::invalid("ssl.projection_dim", "must be at least 2"));
            }
            if ssl.batch_size <= ssl.projection_dim {
                return Err(ConfigError::invalid(
                    "ssl.batch_size",
                    "must exceed the projection dimension for whitening",
                ));
            }
            if ssl.pool_size == Some(0) {
                return Err(ConfigError::invalid("ssl.pool_size", "must be positive"));
            }
            if !(ssl.learning_rate > 0.0) {
                return Err(ConfigError::invalid("ssl.learning_rate", "must be positive"));
            }
            if !(ssl.ridge >= 0.0) {
                return Err(ConfigError::invalid("ssl.ridge", "must be nonnegative"));
            }
            ssl.augment
                .validate()
                .map_err(|msg| ConfigError::invalid("ssl.augment", msg))?;
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "at least one seed required"));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::Parse {
            field: if field == "." { "<root>".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

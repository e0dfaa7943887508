//! The single TOML run document. Every section is optional and defaults to the reference
//! recipe; unknown keys are rejected.
//!
//! ```toml
//! [paths]
//! manifest = "data/manifest.jsonl"   # relative to this file
//! run_name = "baseline"
//!
//! [model]
//! tile_size = 64
//! [model.backbone]
//! base_width = 8
//!
//! [optimizer]
//! seed = 7
//! epochs = 2
//!
//! [loss]
//! lambda1 = 0.25
//! lambda2 = 0.25
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::trainer::{TrainConfig, LAMBDA_GRID};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Directory name under the run root; defaults to `run-<fingerprint prefix>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Values tried for both lambdas; the sweep covers their Cartesian square.
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
        }
    }
}

/// Training sections mirror [`TrainConfig`]; the seed lives in `[optimizer]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub metrics: MetricConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses TOML; errors carry the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    /// Reads, parses and validates a config file. Relative manifest paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.paths.manifest {
            if m.is_relative() {
                cfg.paths.manifest = Some(path.parent().unwrap_or(Path::new("")).join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable config")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            loss: self.loss,
            augmentation: self.augmentation.clone(),
            metrics: self.metrics,
            max_steps: self.max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let Some(name) = &self.paths.run_name {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::config(format!("paths.run_name `{name}` must be a plain directory name")));
            }
        }
        if self.sweep.lambdas.is_empty() {
            return Err(Error::config("sweep.lambdas must not be empty"));
        }
        if let Some(v) = self.sweep.lambdas.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::config(format!("sweep.lambdas entry {v} must be finite and non-negative")));
        }
        Ok(())
    }
}

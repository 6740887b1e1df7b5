//! Experiment description: one JSON document covering data generation,
//! architecture, training, and evaluation settings, plus the root seed all
//! random substreams derive from.
//!
//! Every CLI run resolves its config (file values, then flag overrides,
//! then defaults) and persists the result, so a run directory can always
//! be reproduced from the `resolved-config.json` it contains.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataShape, SyntheticConfig};
use crate::error::{io_err, Error, Result};
use crate::evaluation::DEFAULT_THRESHOLD_SIGMAS;
use crate::model::{ArchConfig, ModelConfig};
use crate::training::TrainConfig;

/// Evaluation settings: thresholds are in units of the train residual std.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds_sigma: Vec<f64>,
    pub radii: Vec<f64>,
    pub n_generate: usize,
    pub interp_steps: usize,
    pub interp_pairs: Vec<(usize, usize)>,
    pub local_centers: Vec<usize>,
    pub local_n_per_center: usize,
    pub local_variance: f64,
    /// Columns in the reconstruction grid images.
    pub grid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds_sigma: DEFAULT_THRESHOLD_SIGMAS.to_vec(),
            radii: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            n_generate: 1000,
            interp_steps: 10,
            interp_pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)],
            local_centers: vec![0, 1, 2, 3, 4],
            local_n_per_center: 100,
            local_variance: 1.0,
            grid_samples: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            synthetic: SyntheticConfig::default(),
            train_fraction: 0.9,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        self.train.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(
                "data.train_fraction must be in (0, 1)".into(),
            ));
        }
        if self.eval.radii.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("eval.radii must be > 0".into()));
        }
        if self.eval.thresholds_sigma.iter().any(|&t| t < 0.0) {
            return Err(Error::Config("eval.thresholds_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// The synthetic section with the run seed folded in.
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.data.synthetic.clone()
        }
    }

    pub fn model_config(&self, shape: DataShape) -> ModelConfig {
        ModelConfig {
            data_shape: shape,
            arch: self.arch.clone(),
        }
    }

    /// Write the fully resolved config (all defaults materialized).
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, json).map_err(io_err(path))
    }
}

//! One JSON document drives a whole experiment: benchmark geometry,
//! training hyperparameters, and evaluation settings. Every field has a
//! default, so a config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::inference::EvalOptions;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train.net.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }

    /// File name for one generated domain CSV, e.g. `source_15.csv`.
    pub fn domain_file(kind: &str, angle: f64) -> String {
        if angle == angle.round() {
            format!("{kind}_{}.csv", angle as i64)
        } else {
            format!("{kind}_{angle}.csv")
        }
    }
}

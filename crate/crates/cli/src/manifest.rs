//! Run provenance. Every command drops a `manifest.json` beside its
//! outputs: the effective config, content hashes of the inputs it read,
//! the seed, timestamps, and the paths it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            status: "running".into(),
            seed,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: String::new(),
        }
    }

    pub fn set_config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("hashing input {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `manifest.json` into `dir` with the given final status.
    pub fn finish(mut self, dir: &Path, status: &str) -> Result<()> {
        let path = dir.join("manifest.json");
        self.status = status.to_string();
        self.finished = chrono::Utc::now().to_rfc3339();
        self.outputs.push(path.display().to_string());
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

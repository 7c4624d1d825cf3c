use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use steerlab::config::ExperimentConfig;
use steerlab::{Error, Result};

/// Everything needed to rerun a command: the effective configuration, the
/// arguments and hashes of its inputs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub seed: u64,
    pub args: Vec<String>,
    pub created_unix_s: u64,
    pub config: &'a ExperimentConfig,
    pub inputs: Vec<InputHash>,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub name: String,
    pub sha256: String,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a ExperimentConfig, seed: u64) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            args: std::env::args().collect(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config,
            inputs: Vec::new(),
        }
    }

    pub fn input(mut self, name: impl Into<String>, sha256: impl Into<String>) -> Self {
        self.inputs.push(InputHash { name: name.into(), sha256: sha256.into() });
        self
    }

    /// Writes `manifest-{tag}.json` into `dir`.
    pub fn write(&self, dir: &Path, tag: &str) -> Result<()> {
        let path = dir.join(format!("manifest-{tag}.json"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

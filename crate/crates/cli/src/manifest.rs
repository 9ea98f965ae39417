//! Run manifests: enough to regenerate an artifact from scratch.

use std::path::Path;

use llep_core::CostParams;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub profile: String,
    pub profile_hash: String,
    pub cost_params: CostParams,
    pub config: RunConfig,
    /// Command-specific arguments not in the run config, such as sweep values.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, outputs: &[&str]) -> Result<Self, CliError> {
        let cost_params = config.cost_params()?;
        let mut config = config.clone();
        // the output directory is where the manifest lives, not part of the run
        config.out = None;
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            profile: if config.cost_params.is_some() {
                "inline".into()
            } else {
                config.profile.clone()
            },
            profile_hash: cost_params.hash(),
            cost_params,
            config,
            extra: serde_json::Value::Null,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

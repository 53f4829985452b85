//! Layered run configuration: a single TOML document with `[simulator]`,
//! `[model]` and `[train]` sections, each optional, merged with command-line
//! flags. Flags win.

use std::path::Path;

use serde::Deserialize;

use fscm_core::model::ModelConfig;
use fscm_core::simulator::SimConfig;
use fscm_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub simulator: Option<SimConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn simulator(&self) -> SimConfig {
        self.simulator.clone().unwrap_or_default()
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    pub fn train(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }
}

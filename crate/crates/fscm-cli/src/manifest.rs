//! Run manifests: every artifact-producing command records what produced
//! the artifact next to it, as `<output>.manifest.json`.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved configuration after merging file and flags.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn config(mut self, config: impl Serialize) -> Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Write `<primary>.manifest.json` next to the primary output.
    pub fn write(self, primary: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().collect(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_ms: self.started.elapsed().as_millis(),
        };
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = primary.with_file_name(name);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Data(format!("cannot write manifest {}: {e}", path.display())))
    }
}

//! Versioned model checkpoints: the model config plus shape-tagged named
//! tensors as a single JSON document. Loading into a mismatching config is
//! an error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineModel;
use crate::model::{ClickModel, FscmModel, ModelConfig, ModelKind};
use crate::numkit::{ParamKind, ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match expected config: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint tensor set is inconsistent: {0}")]
    BadTensors(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

pub fn save(path: impl AsRef<Path>, model: &dyn ClickModel) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors: model
            .params()
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })
            .collect(),
    };
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut writer, &file)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Build a model of the configured kind with fresh seeded parameters.
pub fn build_model(config: ModelConfig, seed: u64) -> Box<dyn ClickModel> {
    match config.kind {
        ModelKind::Fscm => Box::new(FscmModel::new(config, seed)),
        ModelKind::BaselineBlockWise | ModelKind::BaselineListWise => {
            Box::new(BaselineModel::new(config, seed))
        }
    }
}

/// Load a checkpoint, reconstructing the model around its embedded config.
pub fn load(path: impl AsRef<Path>) -> Result<Box<dyn ClickModel>, CheckpointError> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.format_version));
    }
    let config = file.config.clone();
    let params = restore_params(&file)?;
    Ok(match config.kind {
        ModelKind::Fscm => Box::new(FscmModel::with_params(config, params)),
        ModelKind::BaselineBlockWise | ModelKind::BaselineListWise => {
            Box::new(BaselineModel::with_params(config, params))
        }
    })
}

/// Load a checkpoint that must match `expected` exactly.
pub fn load_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Box<dyn ClickModel>, CheckpointError> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.format_version));
    }
    if &file.config != expected {
        return Err(CheckpointError::ConfigMismatch(format!(
            "stored {:?}, expected {:?}",
            file.config, expected
        )));
    }
    let config = file.config.clone();
    let params = restore_params(&file)?;
    Ok(match config.kind {
        ModelKind::Fscm => Box::new(FscmModel::with_params(config, params)),
        ModelKind::BaselineBlockWise | ModelKind::BaselineListWise => {
            Box::new(BaselineModel::with_params(config, params))
        }
    })
}

/// Rebuild the canonical parameter layout for the stored config and fill it
/// from the records; every template tensor must be present with the right
/// shape, extras are rejected.
fn restore_params(file: &CheckpointFile) -> Result<ParamSet, CheckpointError> {
    let template = build_model(file.config.clone(), 0);
    let template = template.params();
    if template.len() != file.tensors.len() {
        return Err(CheckpointError::BadTensors(format!(
            "config wants {} tensors, checkpoint has {}",
            template.len(),
            file.tensors.len()
        )));
    }
    let mut params = ParamSet::new();
    for entry in template.entries() {
        let record = file
            .tensors
            .iter()
            .find(|r| r.name == entry.name)
            .ok_or_else(|| CheckpointError::BadTensors(format!("missing tensor {}", entry.name)))?;
        if record.shape != entry.value.shape() {
            return Err(CheckpointError::BadTensors(format!(
                "tensor {} has shape {:?}, config wants {:?}",
                entry.name,
                record.shape,
                entry.value.shape()
            )));
        }
        let numel: usize = record.shape.iter().product();
        if record.data.len() != numel {
            return Err(CheckpointError::BadTensors(format!(
                "tensor {} carries {} values for shape {:?}",
                entry.name,
                record.data.len(),
                record.shape
            )));
        }
        params.add(&entry.name, entry.kind, Tensor::new(record.shape.clone(), record.data.clone()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComparisonKind;

    fn desk_config() -> ModelConfig {
        ModelConfig { hidden: 8, query_vocab: 10, item_vocab: 10, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = FscmModel::new(desk_config(), 7);
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in loaded.params().entries().iter().zip(model.params().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatching_config_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = FscmModel::new(desk_config(), 7);
        save(&path, &model).unwrap();

        let other = ModelConfig { comparison: ComparisonKind::Inner, ..desk_config() };
        match load_expecting(&path, &other) {
            Err(CheckpointError::ConfigMismatch(_)) => {}
            Err(e) => panic!("expected config mismatch, got {e}"),
            Ok(_) => panic!("expected config mismatch, load succeeded"),
        }

        let same = desk_config();
        assert!(load_expecting(&path, &same).is_ok());
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save(&a, &FscmModel::new(desk_config(), 7)).unwrap();
        save(&b, &FscmModel::new(desk_config(), 7)).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

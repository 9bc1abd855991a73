//! Model checkpoints: the tensor container with the model configuration and
//! training provenance embedded as TOML metadata.

use std::path::Path;

use blinknet_tensor::{checkpoint, RngStream};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig};
use crate::params::ParamStore;

/// Where the weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub epoch: usize,
    pub val_f1: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    info: CheckpointInfo,
    model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub info: CheckpointInfo,
}

fn metadata_text(model: &ModelConfig, info: &CheckpointInfo) -> Result<String> {
    toml::to_string(&Metadata {
        info: info.clone(),
        model: model.clone(),
    })
    .map_err(|e| Error::config("checkpoint", e.to_string()))
}

/// Writes atomically: readers never see a partial file.
pub fn save_model(path: &Path, model: &ModelConfig, params: &ParamStore<f32>, info: &CheckpointInfo) -> Result<()> {
    let meta = metadata_text(model, info)?;
    checkpoint::save(path, &meta, params.iter())?;
    Ok(())
}

/// Loads a checkpoint and checks that its tensors are exactly those the
/// embedded configuration calls for.
pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let ckpt = checkpoint::load(path)?;
    let meta: Metadata = toml::from_str(&ckpt.metadata)
        .map_err(|e| Error::Incompatible(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
    meta.model.validate()?;
    let expected = init_model::<f32>(&meta.model, &RngStream::new(0))?;
    for (name, t) in expected.iter() {
        match ckpt.tensors.get(name) {
            None => {
                return Err(Error::Incompatible(format!(
                    "{}: tensor {name} missing from checkpoint",
                    path.display()
                )))
            }
            Some(found) if found.shape() != t.shape() => {
                return Err(Error::Incompatible(format!(
                    "{}: tensor {name} has shape {:?}, the configuration needs {:?}",
                    path.display(),
                    found.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = ckpt.tensors.keys().find(|k| expected.get(k).is_none()) {
        return Err(Error::Incompatible(format!(
            "{}: unexpected tensor {extra} in checkpoint",
            path.display()
        )));
    }
    let mut params = ParamStore::new();
    for name in expected.names() {
        params.insert(name, ckpt.tensors[name].clone());
    }
    Ok(ModelCheckpoint {
        model: meta.model,
        params,
        info: meta.info,
    })
}

//! Single-file JSON archive of a model and, optionally, its training state.
//!
//! Parameter tensors are stored as base64 little-endian `f32`, so a save/load
//! round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProxyNet};
use crate::nn::{ParamKind, Tensor};
use crate::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: ModelConfig,
    pub params: Vec<SavedParam>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: &ProxyNet<f32>, state: Option<TrainState>) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
                data: STANDARD.encode(p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            })
            .collect();
        Self {
            format: FORMAT_VERSION,
            model: model.config.clone(),
            params,
            state,
        }
    }

    /// Completed epochs, if training state is present.
    pub fn epoch(&self) -> Option<usize> {
        self.state.as_ref().map(|s| s.epoch)
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.state.as_ref().and_then(|s| s.best_val_acc)
    }

    /// Rebuilds the model and loads every stored tensor into it.
    pub fn restore(&self) -> Result<ProxyNet<f32>> {
        if self.format != FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!("unsupported format version {}", self.format)));
        }
        let mut model = ProxyNet::<f32>::build(self.model.clone(), 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "archive holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for saved in &self.params {
            let id = model
                .params
                .find(&saved.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor {:?}", saved.name)))?;
            let expected = model.params.get(id).shape().to_vec();
            if expected != saved.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {:?} has shape {:?}, model expects {expected:?}",
                    saved.name, saved.shape
                )));
            }
            let bytes = STANDARD
                .decode(&saved.data)
                .map_err(|e| Error::CheckpointMismatch(format!("tensor {:?}: {e}", saved.name)))?;
            let n: usize = expected.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::CheckpointMismatch(format!("tensor {:?} has {} bytes, expected {}", saved.name, bytes.len(), 4 * n)));
            }
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            *model.params.get_mut(id) = Tensor::from_vec(&expected, data);
        }
        Ok(model)
    }

    /// Fails unless the archive was built with exactly `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.model == config {
            return Ok(());
        }
        Err(Error::CheckpointMismatch(format!(
            "archive was built with {}, requested {}",
            serde_json::to_string(&self.model)?,
            serde_json::to_string(config)?
        )))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

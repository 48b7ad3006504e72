//! Versioned checkpoint container.
//!
//! A checkpoint is one JSON document holding the model config, every named
//! parameter array in 64-bit precision, the batch-norm running statistics,
//! and (for resumable training checkpoints) the optimizer, scheduler, and
//! RNG stream state. Serialization is deterministic, so save -> load -> save
//! reproduces the file byte-for-byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams, Result};
use crate::tensor::RunningStats;
use crate::training::TrainerState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub bn_running: RunningStats,
    /// Present on training checkpoints; inference-only exports drop it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, trainer: Option<TrainerState>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config,
            params: model.params.clone(),
            bn_running: model.bn_running.clone(),
            trainer,
        }
    }

    /// Reassemble a runnable model (on the default skeleton graph).
    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(super::ModelError::Version(self.version));
        }
        self.config.validate()?;
        let mut model = Model::new(self.config, 0)?;
        model.params = self.params.clone();
        model.bn_running = self.bn_running.clone();
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(super::ModelError::Version(ckpt.version));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

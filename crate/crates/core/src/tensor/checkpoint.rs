//! Checkpoints: one JSON object mapping parameter paths to
//! `{"shape": [...], "data": [...]}`. Floats are written in shortest
//! round-trip form and parsed exactly, so a save/load cycle is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::nn::ParamStore;
use super::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("shape mismatch for {name}: stored {stored:?}, model {model:?}")]
    Shape { name: String, stored: Vec<usize>, model: Vec<usize> },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
        Checkpoint { entries }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    /// Overwrites every entry of `store` from this checkpoint.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let stored = self.entries.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if stored.shape() != store.value(id).shape() {
                return Err(CheckpointError::Shape {
                    name,
                    stored: stored.shape().to_vec(),
                    model: store.value(id).shape().to_vec(),
                });
            }
            *store.value_mut(id) = stored.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let entries: BTreeMap<String, Tensor> = serde_json::from_str(s)?;
        for (name, t) in &entries {
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(CheckpointError::Shape { name: name.clone(), stored: t.shape().to_vec(), model: vec![t.len()] });
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

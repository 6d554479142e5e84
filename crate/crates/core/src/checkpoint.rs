//! JSON checkpoints: parameters, optimizer state and a hash of the model config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamStore};

pub const FORMAT: &str = "avseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub adam: Option<AdamState>,
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys sorted.
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config_hash: String, epoch: usize, adam: Option<AdamState>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config_hash,
            epoch,
            params: store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            adam,
        }
    }

    /// Writes to a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and refuses it unless it was written for `expected_hash`.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Serde(format!(
                "{}: not a version {VERSION} {FORMAT} file",
                path.display()
            )));
        }
        if ck.config_hash != expected_hash {
            return Err(Error::CheckpointMismatch {
                expected: expected_hash.to_string(),
                found: ck.config_hash,
            });
        }
        Ok(ck)
    }

    /// Copies parameters into `store`, which must have identical names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::shape("checkpoint params", store.len(), self.params.len()));
        }
        for nt in &self.params {
            let t = store
                .by_name_mut(&nt.name)
                .ok_or_else(|| Error::Serde(format!("checkpoint has unknown parameter {}", nt.name)))?;
            if t.shape() != nt.shape.as_slice() {
                return Err(Error::shape("checkpoint parameter", (&nt.name, t.shape()), (&nt.name, &nt.shape)));
            }
            t.data_mut().copy_from_slice(&nt.data);
        }
        Ok(())
    }
}

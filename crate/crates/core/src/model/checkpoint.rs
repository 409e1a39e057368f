//! Versioned JSON checkpoints: configuration plus named parameter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

use super::{Detector, DetectorConfig};

pub const CHECKPOINT_FORMAT: &str = "detr-kit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DetectorConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(config: &DetectorConfig, store: &ParamStore) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params: store
                .iter()
                .map(|(_, p)| NamedArray {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuild the detector described by the config and load every array
    /// into it. Missing, extra or misshapen arrays are errors.
    pub fn restore(&self) -> Result<(Detector, ParamStore)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::contract(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let (detector, mut store) = Detector::new(self.config.clone(), 0)?;
        if self.params.len() != store.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} arrays, the configured detector has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (index, array) in self.params.iter().enumerate() {
            let id = store.find(&array.name).ok_or_else(|| Error::Validation {
                index,
                message: format!("unknown parameter {:?}", array.name),
            })?;
            let expected = store.value(id).shape().to_vec();
            if expected != array.shape {
                return Err(Error::Validation {
                    index,
                    message: format!(
                        "parameter {:?} has shape {:?}, the configured detector expects {expected:?}",
                        array.name, array.shape
                    ),
                });
            }
            *store.value_mut(id) = Tensor::new(array.shape.clone(), array.data.clone())?;
        }
        Ok((detector, store))
    }
}

pub fn save_checkpoint(path: &Path, config: &DetectorConfig, store: &ParamStore) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::capture(config, store))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ckpt.restore()
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, TrainState};
use crate::model::{ModelCheckpoint, ModelConfig};

pub const TRAIN_FORMAT: &str = "earlyclass-train";
pub const TRAIN_FORMAT_VERSION: u32 = 1;

/// Resumable training snapshot: configurations, parameters (with input
/// statistics), optimizer moments, history and the best parameters so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub state: TrainState,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl TrainCheckpoint {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, state: TrainState) -> Self {
        Self {
            format: TRAIN_FORMAT.to_string(),
            version: TRAIN_FORMAT_VERSION,
            model_config,
            train_config,
            state,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, TrainError> {
        let ckpt: Self = serde_json::from_str(text).map_err(|source| TrainError::Parse {
            path: origin.to_string(),
            source,
        })?;
        if ckpt.format != TRAIN_FORMAT || ckpt.version != TRAIN_FORMAT_VERSION {
            return Err(TrainError::Version {
                found: ckpt.format,
                version: ckpt.version,
                expected: TRAIN_FORMAT,
                expected_version: TRAIN_FORMAT_VERSION,
            });
        }
        ckpt.model_config.validate()?;
        ckpt.train_config.validate()?;
        let s = &ckpt.state;
        s.params.check_shapes(&ckpt.model_config)?;
        if let Some(best) = &s.best_params {
            best.check_shapes(&ckpt.model_config)?;
        }
        for (moments, what) in [(&s.m, "first moments"), (&s.v, "second moments")] {
            let matches = moments.len() == s.params.tensors().len()
                && moments.iter().zip(s.params.tensors()).all(|(a, b)| a.shape() == b.shape());
            if !matches {
                return Err(TrainError::Config(format!("{what} do not match the parameter shapes")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Model checkpoint holding the selected (best-validation) parameters.
    pub fn model_checkpoint(&self) -> ModelCheckpoint {
        let mut ckpt = ModelCheckpoint::new(self.model_config.clone(), self.state.selected_params().clone());
        ckpt.metadata = self.metadata.clone();
        ckpt
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParameterSet};

pub const MODEL_FORMAT: &str = "earlyclass-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Trained weights with the configuration they were built for.
///
/// Stored as JSON; floats are written in shortest round-trip form, so
/// load → save reproduces the file byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParameterSet,
    /// Free-form provenance such as the training loss settings.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config,
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ModelError> {
        let ckpt: Self = serde_json::from_str(text).map_err(|source| ModelError::Parse {
            path: origin.to_string(),
            source,
        })?;
        if ckpt.format != MODEL_FORMAT || ckpt.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Version {
                found: ckpt.format,
                version: ckpt.version,
                expected: MODEL_FORMAT,
                expected_version: MODEL_FORMAT_VERSION,
            });
        }
        ckpt.config.validate()?;
        ckpt.params.check_shapes(&ckpt.config)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }
}

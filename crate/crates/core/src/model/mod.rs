//! Recurrent classifier with a class-score head and a stopping-probability head.
//!
//! Each observation is standardized per band, passed through `L` stacked LSTM
//! layers (layer-normalized outputs, dropout between layers while training),
//! and the last layer's output `h_t` feeds two linear maps:
//! `ŷ_t = softmax(h_t·W_c + b_c)` and `p_t = σ(h_t·w_δ + b_δ)`.

mod checkpoint;
mod network;
mod params;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError};

pub use checkpoint::{ModelCheckpoint, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use network::{forward, forward_batch, layer_norm, predict, BatchOutput};
#[cfg(test)]
pub(crate) use network::lstm_cell;
pub use params::{LstmLayer, ParamVars, ParameterSet, STD_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("empty input sequence")]
    EmptyInput,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("checkpoint format {found:?} version {version} is not supported (expected {expected:?} version {expected_version})")]
    Version {
        found: String,
        version: u32,
        expected: &'static str,
        expected_version: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Spectral bands per observation.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// Mean of the stopping-head bias draw. The default puts the initial
    /// `p_t` near 0.007 so training starts from late decisions.
    pub stop_bias_init_mean: f64,
    pub stop_bias_init_std: f64,
    /// Learnable layer normalization after each recurrent layer.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 13,
            hidden_dim: 64,
            num_layers: 4,
            num_classes: 9,
            dropout_rate: 0.5,
            stop_bias_init_mean: -5.0,
            stop_bias_init_std: 0.1,
            layer_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be ≥ 1".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim must be ≥ 1".to_string());
        }
        if self.num_layers == 0 {
            problems.push("num_layers must be ≥ 1".to_string());
        }
        if self.num_classes < 2 {
            problems.push(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !self.stop_bias_init_mean.is_finite() {
            problems.push("stop_bias_init_mean must be finite".to_string());
        }
        if !(self.stop_bias_init_std >= 0.0 && self.stop_bias_init_std.is_finite()) {
            problems.push(format!(
                "stop_bias_init_std must be a finite nonnegative number, got {}",
                self.stop_bias_init_std
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }
}

/// Per-step outputs for one sequence: `class_scores` is `T×M` (rows are
/// probability vectors), `stop_probs[t] = p_t` with `stop_probs[T−1] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTrace {
    pub class_scores: Array,
    pub stop_probs: Vec<f64>,
}

impl PredictionTrace {
    pub fn len(&self) -> usize {
        self.stop_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop_probs.is_empty()
    }

    pub fn scores_at(&self, t: usize) -> &[f64] {
        self.class_scores.row_slice(t)
    }

    /// Most probable class at step `t` (lowest index on ties).
    pub fn argmax_at(&self, t: usize) -> usize {
        let row = self.scores_at(t);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests;

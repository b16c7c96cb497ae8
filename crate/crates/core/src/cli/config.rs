use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{usage, CliError, LossModeArg, RunOverrides};
use crate::earliness::LossMode;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Overrides the output directory of every command that writes one.
pub const OUTPUT_DIR_ENV: &str = "EARLYCLASS_OUT_DIR";

const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test fractions by sample count.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { repeats: 1, seed: 0 }
    }
}

/// Everything `train` and `sweep` need, loadable from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Test-set scoring used by `sweep`.
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Flags win over the file. The output directory is resolved separately
    /// by [`RunConfig::resolve_output_dir`].
    pub fn apply(&mut self, o: &RunOverrides) {
        if let Some(d) = &o.dataset {
            self.dataset = Some(d.clone());
        }
        let t = &mut self.train;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.loss_mode {
            t.loss_mode = match v {
                LossModeArg::EarlyReward => LossMode::EarlyReward,
                LossModeArg::CrossEntropy => LossMode::CrossEntropy,
            };
        }
        if let Some(v) = o.sequence_length {
            t.sequence_length = v;
        }
        if let Some(v) = o.micro_batch_size {
            t.micro_batch_size = v;
        }
        if let Some(v) = o.max_grad_norm {
            t.max_grad_norm = Some(v);
        }
        let m = &mut self.model;
        if let Some(v) = o.hidden_dim {
            m.hidden_dim = v;
        }
        if let Some(v) = o.num_layers {
            m.num_layers = v;
        }
        if let Some(v) = o.dropout_rate {
            m.dropout_rate = v;
        }
        if let Some(v) = o.split_seed {
            self.split.seed = v;
        }
    }

    /// Output directory: the flag or config value, unless the environment
    /// variable overrides it.
    pub fn resolve_output_dir(explicit_flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit_flag {
            return p.to_path_buf();
        }
        if let Some(env) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        configured.map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR), Path::to_path_buf)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        let f = self.split.fractions;
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(usage(format!("split fractions must be positive and sum to 1, got {f:?}")));
        }
        if self.eval.repeats == 0 {
            return Err(usage("eval.repeats must be ≥ 1"));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        let path = self
            .dataset
            .as_deref()
            .ok_or_else(|| usage("no dataset given (use --dataset or the config's \"dataset\")"))?;
        if !path.is_file() {
            return Err(usage(format!("dataset not found: {}", path.display())));
        }
        Ok(path)
    }
}

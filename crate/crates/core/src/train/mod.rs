//! Adam optimization of the early-classification network.
//!
//! Each epoch reshuffles the training samples, draws a fresh `T`-step
//! subsample of every sequence, and takes one Adam step per batch. Batches are
//! processed in micro-batches whose gradients are summed, so memory stays
//! bounded at large batch sizes. Every random draw is derived from the
//! configured seed and the (epoch, batch) position, which makes a resumed run
//! replay the uninterrupted one exactly.

mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, subsample, DataError, DatasetSplit, TimeSeriesSample};
use crate::diffcore::{Array, DiffError, Tape};
use crate::earliness::{
    batch_sequence_loss, sequence_loss, EarlinessError, LossConfig, LossMode, StopDecision,
};
use crate::model::{forward_batch, predict, ModelConfig, ModelError, ParamVars, ParameterSet};

pub use checkpoint::{TrainCheckpoint, TRAIN_FORMAT, TRAIN_FORMAT_VERSION};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SUBSAMPLE_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const VAL_SUBSAMPLE_STREAM: u64 = 5;
const VAL_STOP_STREAM: u64 = 6;

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy,val_mean_stop_fraction";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] EarlinessError),
    #[error("non-finite gradient in {param} at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("{param}: gradient shape {got:?} does not match parameter shape {expected:?}")]
    GradientShape {
        param: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence { epoch: usize, batch: usize, reason: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("training checkpoint {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("training checkpoint format {found:?} version {version} is not supported (expected {expected:?} version {expected_version})")]
    Version {
        found: String,
        version: u32,
        expected: &'static str,
        expected_version: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Observations drawn from each sequence per epoch.
    pub sequence_length: usize,
    /// Sequences per tape; gradients of the micro-batches of one batch are
    /// summed before the optimizer step.
    pub micro_batch_size: usize,
    /// Rescale the joint gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 1024,
            epochs: 30,
            alpha: 0.6,
            loss_mode: LossMode::EarlyReward,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sequence_length: 70,
            micro_batch_size: 32,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        match self.loss_mode {
            LossMode::EarlyReward => LossConfig::early_reward(self.alpha),
            LossMode::CrossEntropy => LossConfig::cross_entropy(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be ≥ 1".to_string());
        }
        if self.micro_batch_size == 0 {
            problems.push("micro_batch_size must be ≥ 1".to_string());
        }
        if self.sequence_length == 0 {
            problems.push("sequence_length must be ≥ 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            problems.push(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                problems.push(format!("max_grad_norm must be positive, got {n}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Metrics recorded at the end of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_mean_stop_fraction: f64,
}

/// Optimizer state and bookkeeping; everything needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParameterSet,
    /// Adam first moments, in [`ParameterSet::named_tensors`] order.
    pub m: Vec<Array>,
    /// Adam second moments.
    pub v: Vec<Array>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Parameters of the epoch with the best validation accuracy so far;
    /// ties go to the lower validation loss.
    pub best_params: Option<ParameterSet>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(params: ParameterSet) -> Self {
        let zeros = |p: &ParameterSet| -> Vec<Array> {
            p.tensors().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect()
        };
        Self {
            m: zeros(&params),
            v: zeros(&params),
            params,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            best_params: None,
            best_epoch: None,
        }
    }

    /// Best-validation parameters, or the current ones before any epoch ran.
    pub fn selected_params(&self) -> &ParameterSet {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.epoch, h.train_loss, h.val_loss, h.val_accuracy, h.val_mean_stop_fraction
        );
    }
    out
}

/// One bias-corrected Adam update. Gradients must follow
/// [`ParameterSet::named_tensors`] order.
pub fn adam_step(state: &mut TrainState, grads: &[Array], cfg: &TrainConfig) -> Result<(), TrainError> {
    let names: Vec<String> = state.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameter arrays",
            grads.len(),
            names.len()
        )));
    }
    for ((name, g), p) in names.iter().zip(grads).zip(state.params.tensors()) {
        if g.shape() != p.shape() {
            return Err(TrainError::GradientShape {
                param: name.clone(),
                expected: p.shape(),
                got: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_eps;
    for (((p, g), m), v) in state
        .params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((theta, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn clip_gradients(grads: &mut [Array], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
}

/// Mean batch loss and its gradient for one batch of equally long sequences,
/// accumulated over micro-batches.
pub fn batch_gradients(
    params: &ParameterSet,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    xs: &[&Array],
    labels: &[usize],
    micro_batch_size: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Array>), TrainError> {
    let n = xs.len();
    if n == 0 {
        return Err(TrainError::EmptySplit("batch"));
    }
    let mut grads: Vec<Array> = params.tensors().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect();
    let mut loss = 0.0;
    for (k, (chunk, chunk_labels)) in xs.chunks(micro_batch_size).zip(labels.chunks(micro_batch_size)).enumerate() {
        let weight = chunk.len() as f64 / n as f64;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params, true);
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix_seed(&[s, k as u64])));
        let out = forward_batch(&mut tape, &vars, params, model_cfg, chunk, rng.as_mut())?;
        let l = batch_sequence_loss(&mut tape, &out, chunk_labels, loss_cfg)?;
        loss += weight * tape.value(l).item().expect("scalar loss");
        tape.backward(l).map_err(ModelError::from)?;
        for (acc, g) in grads.iter_mut().zip(vars.gradients(&tape)) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += weight * b);
        }
    }
    Ok((loss, grads))
}

/// Validation subsample of one sequence; fixed across epochs.
pub fn validation_subsample(sample: &TimeSeriesSample, cfg: &TrainConfig) -> Result<Array, TrainError> {
    let seed = mix_seed(&[cfg.seed, VAL_SUBSAMPLE_STREAM, sample.id]);
    Ok(subsample(sample, cfg.sequence_length, seed)?.observations)
}

struct Validation {
    loss: f64,
    accuracy: f64,
    mean_stop_fraction: f64,
}

/// Validation metrics. Models trained with the early-reward loss are read at
/// a sampled stopping step (fixed seed per sample); cross-entropy models are
/// read at the last step.
fn validate(
    params: &ParameterSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    val: &[&TimeSeriesSample],
    val_inputs: &[Array],
) -> Result<Validation, TrainError> {
    let loss_cfg = cfg.loss();
    let refs: Vec<&Array> = val_inputs.iter().collect();
    let traces = predict(params, model_cfg, &refs)?;
    let (mut loss, mut correct, mut stop) = (0.0, 0usize, 0.0);
    for (s, trace) in val.iter().zip(&traces) {
        loss += sequence_loss(trace, s.label, &loss_cfg)?;
        let decision = match cfg.loss_mode {
            LossMode::EarlyReward => {
                StopDecision::sample(trace, mix_seed(&[cfg.seed, VAL_STOP_STREAM, s.id]))?
            }
            LossMode::CrossEntropy => StopDecision::at(trace, trace.len() - 1),
        };
        correct += usize::from(decision.label == s.label);
        stop += decision.fraction();
    }
    let n = val.len() as f64;
    Ok(Validation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        mean_stop_fraction: stop / n,
    })
}

fn check_samples(
    samples: &[&TimeSeriesSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for s in samples {
        if s.bands() != model_cfg.input_dim {
            return Err(ModelError::Shape {
                what: format!("bands of sample {}", s.id),
                expected: model_cfg.input_dim,
                got: s.bands(),
            }
            .into());
        }
        if s.label >= model_cfg.num_classes {
            return Err(EarlinessError::ClassIndex {
                class: s.label,
                classes: model_cfg.num_classes,
            }
            .into());
        }
        if s.len() < cfg.sequence_length {
            return Err(DataError::TooShort {
                id: s.id,
                available: s.len(),
                requested: cfg.sequence_length,
            }
            .into());
        }
    }
    Ok(())
}

/// Fresh parameters for `cfg.seed` with input statistics fitted on `train`.
pub fn initial_state(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[&TimeSeriesSample],
) -> Result<TrainState, TrainError> {
    let mut params = ParameterSet::init(model_cfg, mix_seed(&[cfg.seed, INIT_STREAM]))?;
    let (mean, std) = crate::data::fit_normalization(train.iter().copied())?;
    params.set_normalization(mean, std)?;
    Ok(TrainState::new(params))
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`, calling `on_epoch` after
/// each one.
pub fn run_epochs(
    state: &mut TrainState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[&TimeSeriesSample],
    val: &[&TimeSeriesSample],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<(), TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    state.params.check_shapes(model_cfg)?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    check_samples(train, model_cfg, cfg)?;
    check_samples(val, model_cfg, cfg)?;
    let loss_cfg = cfg.loss();
    let val_inputs: Vec<Array> = val
        .iter()
        .map(|s| validation_subsample(s, cfg))
        .collect::<Result<_, _>>()?;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SHUFFLE_STREAM, epoch as u64])));

        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = train[i];
                let seed = mix_seed(&[cfg.seed, SUBSAMPLE_STREAM, epoch as u64, s.id]);
                inputs.push(subsample(s, cfg.sequence_length, seed)?.observations);
                labels.push(s.label);
            }
            let refs: Vec<&Array> = inputs.iter().collect();
            let dropout_seed = mix_seed(&[cfg.seed, DROPOUT_STREAM, epoch as u64, batch as u64]);
            let (loss, mut grads) = batch_gradients(
                &state.params,
                model_cfg,
                &loss_cfg,
                &refs,
                &labels,
                cfg.micro_batch_size,
                Some(dropout_seed),
            )
            .map_err(|e| match e {
                TrainError::Model(ModelError::Diff(e @ DiffError::NonFinite { .. })) => TrainError::Divergence {
                    epoch: epoch + 1,
                    batch,
                    reason: e.to_string(),
                },
                other => other,
            })?;
            let diverged = |reason: String| TrainError::Divergence {
                epoch: epoch + 1,
                batch,
                reason,
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_gradients(&mut grads, max_norm);
            }
            adam_step(state, &grads, cfg).map_err(|e| match e {
                e @ TrainError::NonFiniteGradient { .. } => diverged(e.to_string()),
                other => other,
            })?;
            epoch_loss += loss * idx.len() as f64;
        }

        let v = validate(&state.params, model_cfg, cfg, val, &val_inputs)?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
            val_mean_stop_fraction: v.mean_stop_fraction,
        };
        // ties on accuracy go to the lower validation loss
        let best_so_far = state
            .best_epoch
            .and_then(|e| state.history.iter().find(|h| h.epoch == e))
            .map(|h| (h.val_accuracy, h.val_loss));
        let improves = |(acc, loss): (f64, f64)| {
            metrics.val_accuracy > acc || (metrics.val_accuracy == acc && metrics.val_loss < loss)
        };
        if best_so_far.is_none_or(improves) {
            state.best_params = Some(state.params.clone());
            state.best_epoch = Some(metrics.epoch);
        }
        state.history.push(metrics);
        state.epoch += 1;
        on_epoch(&metrics);
    }
    Ok(())
}

/// Trains from scratch (or from `init` when given) on the training and
/// validation parts of `split`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[TimeSeriesSample],
    split: &DatasetSplit,
    init: Option<ParameterSet>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainState, TrainError> {
    let train_set: Vec<&TimeSeriesSample> = split.train.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&TimeSeriesSample> = split.val.iter().map(|&i| &samples[i]).collect();
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let mut state = match init {
        Some(params) => TrainState::new(params),
        None => initial_state(model_cfg, cfg, &train_set)?,
    };
    run_epochs(&mut state, model_cfg, cfg, &train_set, &val_set, on_epoch)?;
    Ok(state)
}

//! The early-classification mechanism.
//!
//! Stopping probabilities `p_t` define a first-stop distribution
//! `P(t) = p_t · ∏_{τ<t} (1 − p_τ)`, which normalizes because the last step is
//! forced to `p_{T−1} = 1`. Training weights a per-step loss by `P(t)`:
//!
//! ```text
//! L   = Σ_t P(t) · L_t
//! L_t = α · (−log ŷ⁺_t) − (1 − α) · ŷ⁺_t · (1 − t/T)
//! ```
//!
//! so the stopping head receives gradients through `P`. At inference a stop
//! index is drawn by sequential Bernoulli trials on `p_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape, Var};
use crate::model::{BatchOutput, PredictionTrace};

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Tolerance on `p[T−1] = 1` and on probability ranges.
const PROB_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EarlinessError {
    #[error("stop probabilities are empty")]
    Empty,
    #[error("stop probability p[{index}] = {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("last stop probability must be forced to 1, got {0}")]
    Terminal(f64),
    #[error("class index {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("{labels} labels for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Stopping-time-weighted α-mix of cross entropy and earliness reward.
    #[default]
    EarlyReward,
    /// Per-step cross entropy averaged uniformly over all steps.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub mode: LossMode,
}

impl LossConfig {
    pub fn early_reward(alpha: f64) -> Self {
        Self {
            alpha,
            mode: LossMode::EarlyReward,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            alpha: 1.0,
            mode: LossMode::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<(), EarlinessError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EarlinessError::Alpha(self.alpha));
        }
        Ok(())
    }
}

fn check_probs(p: &[f64]) -> Result<(), EarlinessError> {
    if p.is_empty() {
        return Err(EarlinessError::Empty);
    }
    for (index, &value) in p.iter().enumerate() {
        if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&value) || value.is_nan() {
            return Err(EarlinessError::OutOfRange { index, value });
        }
    }
    Ok(())
}

/// First-stop probabilities `P(t)` over `t = 0..T−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppingDistribution {
    pub probs: Vec<f64>,
}

impl StoppingDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// `P[t] = p[t] · ∏_{τ<t}(1 − p[τ])` with a running survival product.
pub fn stopping_distribution(p: &[f64]) -> Result<StoppingDistribution, EarlinessError> {
    check_probs(p)?;
    let last = p[p.len() - 1];
    if (last - 1.0).abs() > PROB_TOL {
        return Err(EarlinessError::Terminal(last));
    }
    let mut survival = 1.0;
    let probs = p
        .iter()
        .map(|&pt| {
            let stop = pt * survival;
            survival *= 1.0 - pt;
            stop
        })
        .collect();
    Ok(StoppingDistribution { probs })
}

/// `−log(ŷ⁺)` with `ŷ⁺` clamped to `[PROB_FLOOR, 1]`.
pub fn classification_loss(scores: &[f64], class: usize) -> Result<f64, EarlinessError> {
    let y_plus = *scores.get(class).ok_or(EarlinessError::ClassIndex {
        class,
        classes: scores.len(),
    })?;
    Ok(-y_plus.clamp(PROB_FLOOR, 1.0).ln())
}

/// `ŷ⁺ · (1 − t/T)`: full credit at `t = 0`, none at `t = T`.
pub fn earliness_reward(t: usize, len: usize, y_plus: f64) -> f64 {
    y_plus * (1.0 - t as f64 / len as f64)
}

/// `α · L_c − (1 − α) · R_e` at step `t` of a length-`len` sequence.
pub fn step_loss(
    scores: &[f64],
    class: usize,
    t: usize,
    len: usize,
    cfg: &LossConfig,
) -> Result<f64, EarlinessError> {
    let ce = classification_loss(scores, class)?;
    let reward = earliness_reward(t, len, scores[class]);
    Ok(combine(cfg.alpha, ce, reward))
}

/// Skips zero-weighted terms so the degenerate weights are exact.
fn combine(alpha: f64, ce: f64, reward: f64) -> f64 {
    match alpha {
        a if a == 1.0 => ce,
        a if a == 0.0 => -reward,
        a => a * ce - (1.0 - a) * reward,
    }
}

/// Scalar loss of one full-sequence trace.
pub fn sequence_loss(
    trace: &PredictionTrace,
    class: usize,
    cfg: &LossConfig,
) -> Result<f64, EarlinessError> {
    cfg.validate()?;
    let len = trace.len();
    match cfg.mode {
        LossMode::CrossEntropy => {
            check_probs(&trace.stop_probs)?;
            let mut total = 0.0;
            for t in 0..len {
                total += classification_loss(trace.scores_at(t), class)?;
            }
            Ok(total / len as f64)
        }
        LossMode::EarlyReward => {
            let dist = stopping_distribution(&trace.stop_probs)?;
            let mut total = 0.0;
            for (t, weight) in dist.probs.iter().enumerate() {
                total += weight * step_loss(trace.scores_at(t), class, t, len, cfg)?;
            }
            Ok(total)
        }
    }
}

/// Differentiable batch loss: the per-sequence loss averaged over the batch.
///
/// Gradients reach the class head through `ŷ⁺_t` and the stopping head
/// through `P(t)`.
pub fn batch_sequence_loss(
    tape: &mut Tape,
    out: &BatchOutput,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var, EarlinessError> {
    cfg.validate()?;
    let len = out.len();
    if len == 0 {
        return Err(EarlinessError::Empty);
    }
    let (batch, classes) = tape.value(out.class_scores[0]).shape();
    if labels.len() != batch {
        return Err(EarlinessError::LabelCount {
            labels: labels.len(),
            batch,
        });
    }
    if let Some(&class) = labels.iter().find(|&&c| c >= classes) {
        return Err(EarlinessError::ClassIndex { class, classes });
    }
    let alpha = cfg.alpha;

    let mut total: Option<Var> = None;
    let mut survival: Option<Var> = None;
    for t in 0..len {
        let y_plus = tape.gather_cols(out.class_scores[t], labels)?;
        let term = match cfg.mode {
            LossMode::CrossEntropy => {
                let clamped = tape.clamp(y_plus, PROB_FLOOR, 1.0);
                let log_p = tape.log(clamped)?;
                tape.neg(log_p)
            }
            LossMode::EarlyReward => {
                let scaled_ce = if alpha > 0.0 {
                    let clamped = tape.clamp(y_plus, PROB_FLOOR, 1.0);
                    let log_p = tape.log(clamped)?;
                    Some(tape.scale(log_p, -alpha))
                } else {
                    None
                };
                let scaled_reward = if alpha < 1.0 {
                    let horizon = 1.0 - t as f64 / len as f64;
                    Some(tape.scale(y_plus, -(1.0 - alpha) * horizon))
                } else {
                    None
                };
                let step = match (scaled_ce, scaled_reward) {
                    (Some(a), Some(b)) => tape.add(a, b)?,
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!("alpha is either > 0 or < 1"),
                };
                let p = out.stop_probs[t];
                let weight = match survival {
                    None => p,
                    Some(s) => tape.mul(p, s)?,
                };
                if t + 1 < len {
                    let keep = tape.one_minus(p);
                    survival = Some(match survival {
                        None => keep,
                        Some(s) => tape.mul(s, keep)?,
                    });
                }
                tape.mul(weight, step)?
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let mut per_sequence = total.expect("len > 0");
    if cfg.mode == LossMode::CrossEntropy {
        per_sequence = tape.scale(per_sequence, 1.0 / len as f64);
    }
    Ok(tape.mean(per_sequence)?)
}

/// Differentiable `P(t)` for a batch, each entry `B×1`. Exposed for
/// diagnostics and tests.
pub fn batch_stopping_distribution(
    tape: &mut Tape,
    stop_probs: &[Var],
) -> Result<Vec<Var>, EarlinessError> {
    let mut out = Vec::with_capacity(stop_probs.len());
    let mut survival: Option<Var> = None;
    for &p in stop_probs {
        out.push(match survival {
            None => p,
            Some(s) => tape.mul(p, s)?,
        });
        let keep = tape.one_minus(p);
        survival = Some(match survival {
            None => keep,
            Some(s) => tape.mul(s, keep)?,
        });
    }
    Ok(out)
}

/// First index whose Bernoulli(`p_t`) draw fires; `T−1` if none does.
pub fn sample_stop_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<usize, EarlinessError> {
    check_probs(p)?;
    let last = p.len() - 1;
    Ok(p[..last]
        .iter()
        .position(|&pt| rng.random::<f64>() < pt)
        .unwrap_or(last))
}

/// A sampled stopping decision and the label read off at that step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub t_stop: usize,
    pub label: usize,
    pub len: usize,
}

impl StopDecision {
    pub fn sample(trace: &PredictionTrace, seed: u64) -> Result<Self, EarlinessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(trace, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        trace: &PredictionTrace,
        rng: &mut R,
    ) -> Result<Self, EarlinessError> {
        let t_stop = sample_stop_index(&trace.stop_probs, rng)?;
        Ok(Self::at(trace, t_stop))
    }

    pub fn at(trace: &PredictionTrace, t_stop: usize) -> Self {
        Self {
            t_stop,
            label: trace.argmax_at(t_stop),
            len: trace.len(),
        }
    }

    /// `t_stop / (T−1)`; a one-step sequence counts as a terminal stop.
    pub fn fraction(&self) -> f64 {
        normalized_time(self.t_stop, self.len)
    }
}

pub(crate) fn normalized_time(t: usize, len: usize) -> f64 {
    if len <= 1 {
        1.0
    } else {
        t as f64 / (len - 1) as f64
    }
}

/// `Σ_t P[t] · t/(T−1)`, the expected normalized stopping time.
pub fn expected_stop_fraction(p: &[f64]) -> Result<f64, EarlinessError> {
    let dist = stopping_distribution(p)?;
    let len = p.len();
    Ok(dist
        .probs
        .iter()
        .enumerate()
        .map(|(t, w)| w * normalized_time(t, len))
        .sum())
}

/// Step nearest the expected stopping time; the deterministic stop rule.
pub fn expected_stop_index(p: &[f64]) -> Result<usize, EarlinessError> {
    let f = expected_stop_fraction(p)?;
    Ok(((f * (p.len() - 1) as f64).round() as usize).min(p.len() - 1))
}

/// Builds a one-sequence trace; convenient for tests and synthetic traces.
pub fn trace_from_parts(scores: Vec<Vec<f64>>, stop_probs: Vec<f64>) -> Result<PredictionTrace, DiffError> {
    Ok(PredictionTrace {
        class_scores: Array::from_rows(&scores)?,
        stop_probs,
    })
}

#[cfg(test)]
mod tests;

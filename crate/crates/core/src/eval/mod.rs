//! Metrics, per-class stopping-time statistics and the α-sweep harness.

mod metrics;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, subsample, DataError, TimeSeriesSample};
use crate::diffcore::Array;
use crate::earliness::{expected_stop_fraction, expected_stop_index, EarlinessError, StopDecision};
use crate::model::{predict, ModelConfig, ModelError, ParameterSet, PredictionTrace};

pub use metrics::{
    five_number, kappa, precision_recall_f1, quantile, spearman, ClassScores, ConfusionMatrix, FiveNumber, Kappa,
    MeanStd, PrecisionRecall,
};
pub use sweep::{alpha_sweep, sweep_cells_csv, SweepCell, SweepOptions, SweepResult, SweepRow, SWEEP_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Confusion(String),
    #[error("cannot evaluate an empty test set")]
    EmptyTestSet,
    #[error("sample {id} has label {label}, model has {classes} classes")]
    Label { id: u64, label: usize, classes: usize },
    #[error("sample {id} has {bands} bands, model expects {expected}")]
    Bands { id: u64, bands: usize, expected: usize },
    #[error("invalid evaluation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] EarlinessError),
}

/// How the stopping step is chosen for each sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StopMode {
    /// Sequential Bernoulli draws on `p_t`, seeded per repeat and sample.
    Sampled { seed: u64 },
    /// Step nearest the expected stopping time.
    Expected,
    /// Always the last step; the full-sequence classifier.
    Final,
}

impl StopMode {
    pub fn name(&self) -> &'static str {
        match self {
            StopMode::Sampled { .. } => "sampled",
            StopMode::Expected => "expected",
            StopMode::Final => "final",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub stop_mode: StopMode,
    /// Repeats of the sampled stop rule; deterministic modes run once.
    pub repeats: usize,
    /// Observations drawn from each test sequence (fixed seed per sample);
    /// `None` evaluates the raw sequences.
    pub sequence_length: Option<usize>,
    pub subsample_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stop_mode: StopMode::Sampled { seed: 0 },
            repeats: 1,
            sequence_length: Some(70),
            subsample_seed: 0,
        }
    }
}

/// Summary metrics of one pass over the test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub tstop: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
}

/// Stopping-time summary of one true class, as normalized fraction and as
/// day of year of the observation at which the model stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStopStats {
    pub class: usize,
    pub n: usize,
    pub fraction: FiveNumber,
    pub day: FiveNumber,
}

/// One stopping decision annotated with its truth and timing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRecord {
    pub truth: usize,
    pub fraction: f64,
    pub day: f64,
}

/// Five-number summaries per class; classes without records are returned
/// separately.
pub fn stop_time_stats(records: &[StopRecord], classes: usize) -> (Vec<ClassStopStats>, Vec<usize>) {
    let mut stats = Vec::new();
    let mut omitted = Vec::new();
    for class in 0..classes {
        let fractions: Vec<f64> = records.iter().filter(|r| r.truth == class).map(|r| r.fraction).collect();
        let days: Vec<f64> = records.iter().filter(|r| r.truth == class).map(|r| r.day).collect();
        match (five_number(&fractions), five_number(&days)) {
            (Some(fraction), Some(day)) => stats.push(ClassStopStats {
                class,
                n: fractions.len(),
                fraction,
                day,
            }),
            _ => omitted.push(class),
        }
    }
    (stats, omitted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub repeats: usize,
    pub stop_mode: String,
    pub accuracy: MeanStd,
    pub tstop: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub kappa: MeanStd,
    /// Mean of `Σ_t P(t)·t/(T−1)`, independent of the stop rule.
    pub expected_tstop: f64,
    /// From the first repeat.
    pub per_class: Vec<ClassScores>,
    pub kappa_degenerate: bool,
    /// From the first repeat.
    pub stop_stats: Vec<ClassStopStats>,
    /// Classes with no test samples; absent from `stop_stats`.
    pub omitted_classes: Vec<usize>,
    pub runs: Vec<RunMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// From the first repeat.
    pub confusion: ConfusionMatrix,
}

/// Prepared model inputs and timestamps of test sequences.
pub fn prepare_inputs(
    samples: &[&TimeSeriesSample],
    opts: &EvalOptions,
) -> Result<(Vec<Array>, Vec<Vec<f64>>), EvalError> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut days = Vec::with_capacity(samples.len());
    for s in samples {
        match opts.sequence_length {
            Some(t) => {
                let sub = subsample(s, t, mix_seed(&[opts.subsample_seed, s.id]))?;
                xs.push(sub.observations);
                days.push(sub.days);
            }
            None => {
                xs.push(s.observations.clone());
                days.push(s.days.clone());
            }
        }
    }
    Ok((xs, days))
}

/// Metrics from already computed traces; `days[i]` are the timestamps of
/// the steps of `traces[i]`.
pub fn evaluate_traces(
    traces: &[PredictionTrace],
    labels: &[usize],
    ids: &[u64],
    days: &[Vec<f64>],
    classes: usize,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let repeats = match opts.stop_mode {
        StopMode::Sampled { .. } => {
            if opts.repeats == 0 {
                return Err(EvalError::Config("repeats must be ≥ 1".into()));
            }
            opts.repeats
        }
        _ => 1,
    };
    let expected_tstop = traces
        .iter()
        .map(|t| expected_stop_fraction(&t.stop_probs))
        .sum::<Result<f64, _>>()?
        / traces.len() as f64;

    let mut runs = Vec::with_capacity(repeats);
    let mut first: Option<(ConfusionMatrix, PrecisionRecall, Kappa, Vec<StopRecord>)> = None;
    for r in 0..repeats {
        let mut cm = ConfusionMatrix::new(classes);
        let mut records = Vec::with_capacity(traces.len());
        for (i, trace) in traces.iter().enumerate() {
            let decision = match opts.stop_mode {
                StopMode::Sampled { seed } => StopDecision::sample(trace, mix_seed(&[seed, r as u64, ids[i]]))?,
                StopMode::Expected => StopDecision::at(trace, expected_stop_index(&trace.stop_probs)?),
                StopMode::Final => StopDecision::at(trace, trace.len() - 1),
            };
            cm.add(labels[i], decision.label)?;
            records.push(StopRecord {
                truth: labels[i],
                fraction: decision.fraction(),
                day: days[i][decision.t_stop],
            });
        }
        let prf = precision_recall_f1(&cm);
        let k = kappa(&cm);
        runs.push(RunMetrics {
            accuracy: cm.accuracy(),
            tstop: records.iter().map(|r| r.fraction).sum::<f64>() / records.len() as f64,
            precision: prf.macro_precision,
            recall: prf.macro_recall,
            f1: prf.macro_f1,
            kappa: k.value,
        });
        if first.is_none() {
            first = Some((cm, prf, k, records));
        }
    }
    let (confusion, prf, k, records) = first.expect("at least one repeat");
    let (stop_stats, omitted_classes) = stop_time_stats(&records, classes);
    let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    let report = EvalReport {
        samples: traces.len(),
        repeats,
        stop_mode: opts.stop_mode.name().to_string(),
        accuracy: col(|m| m.accuracy),
        tstop: col(|m| m.tstop),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        f1: col(|m| m.f1),
        kappa: col(|m| m.kappa),
        expected_tstop,
        per_class: prf.per_class,
        kappa_degenerate: k.degenerate,
        stop_stats,
        omitted_classes,
        runs,
    };
    Ok(Evaluation { report, confusion })
}

/// Dropout-free evaluation of `params` on `samples`.
pub fn evaluate(
    params: &ParameterSet,
    cfg: &ModelConfig,
    samples: &[&TimeSeriesSample],
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for s in samples {
        if s.label >= cfg.num_classes {
            return Err(EvalError::Label {
                id: s.id,
                label: s.label,
                classes: cfg.num_classes,
            });
        }
        if s.bands() != cfg.input_dim {
            return Err(EvalError::Bands {
                id: s.id,
                bands: s.bands(),
                expected: cfg.input_dim,
            });
        }
    }
    let (xs, days) = prepare_inputs(samples, opts)?;
    let refs: Vec<&Array> = xs.iter().collect();
    let traces = predict(params, cfg, &refs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    evaluate_traces(&traces, &labels, &ids, &days, cfg.num_classes, opts)
}

fn class_label(class: usize, names: Option<&[String]>) -> String {
    names.and_then(|n| n.get(class).cloned()).unwrap_or_else(|| class.to_string())
}

impl EvalReport {
    /// `metric,mean,std` rows for the headline metrics.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for (name, m) in self.headline() {
            let _ = writeln!(out, "{name},{},{}", m.mean, m.std);
        }
        let _ = writeln!(out, "expected_tstop,{},0", self.expected_tstop);
        out
    }

    pub fn headline(&self) -> [(&'static str, MeanStd); 6] {
        [
            ("accuracy", self.accuracy),
            ("tstop", self.tstop),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("kappa", self.kappa),
        ]
    }

    pub fn class_metrics_csv(&self, names: Option<&[String]>) -> String {
        let mut out = String::from("class,support,precision,recall,f1,degenerate\n");
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                class_label(c, names),
                s.support,
                s.precision,
                s.recall,
                s.f1,
                s.degenerate
            );
        }
        out
    }

    pub fn stop_stats_csv(&self, names: Option<&[String]>) -> String {
        let mut out =
            String::from("class,n,min,q1,median,q3,max,min_doy,q1_doy,median_doy,q3_doy,max_doy\n");
        for s in &self.stop_stats {
            let (f, d) = (s.fraction, s.day);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                class_label(s.class, names),
                s.n,
                f.min,
                f.q1,
                f.median,
                f.q3,
                f.max,
                d.min,
                d.q1,
                d.median,
                d.q3,
                d.max
            );
        }
        out
    }

    /// Human-readable summary.
    pub fn summary_text(&self) -> String {
        let mut out = format!(
            "{} samples, stop mode {}, {} repeat(s)\n",
            self.samples, self.stop_mode, self.repeats
        );
        for (name, m) in self.headline() {
            let _ = writeln!(out, "  {name:<10} {:.4} ± {:.4}", m.mean, m.std);
        }
        let _ = writeln!(out, "  {:<10} {:.4}", "E[tstop]", self.expected_tstop);
        if self.kappa_degenerate {
            out.push_str("  note: chance agreement is 1, kappa reported as 0\n");
        }
        if !self.omitted_classes.is_empty() {
            let _ = writeln!(out, "  note: no test samples for classes {:?}", self.omitted_classes);
        }
        out
    }
}

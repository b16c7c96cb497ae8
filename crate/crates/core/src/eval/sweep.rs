use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{evaluate, EvalError, EvalOptions, EvalReport, MeanStd};
use crate::data::{DatasetSplit, TimeSeriesSample};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig};

pub const SWEEP_HEADER: &str = "alpha,accuracy_mean,accuracy_std,tstop_mean,tstop_std,precision_mean,precision_std,\
recall_mean,recall_std,f1_mean,f1_std,kappa_mean,kappa_std,failed_cells";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub alphas: Vec<f64>,
    pub seeds_per_alpha: usize,
    pub eval: EvalOptions,
    /// Cells trained concurrently.
    pub threads: usize,
}

/// One trained-and-evaluated (α, seed) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub seed: u64,
    pub outcome: Result<EvalReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: MeanStd,
    pub tstop: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub kappa: MeanStd,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.alpha);
            for m in [r.accuracy, r.tstop, r.precision, r.recall, r.f1, r.kappa] {
                let _ = write!(out, ",{},{}", m.mean, m.std);
            }
            let _ = writeln!(out, ",{}", r.failed);
        }
        out
    }
}

/// Per-cell CSV: `alpha,seed,status,accuracy,tstop,precision,recall,f1,kappa,error`.
pub fn sweep_cells_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("alpha,seed,status,accuracy,tstop,precision,recall,f1,kappa,error\n");
    for c in cells {
        match &c.outcome {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{},{},ok,{},{},{},{},{},{},",
                    c.alpha, c.seed, r.accuracy.mean, r.tstop.mean, r.precision.mean, r.recall.mean, r.f1.mean, r.kappa.mean
                );
            }
            Err(e) => {
                let msg = e.replace(['"', '\n'], " ");
                let _ = writeln!(out, "{},{},failed,,,,,,,\"{msg}\"", c.alpha, c.seed);
            }
        }
    }
    out
}

fn run_cell(
    model_cfg: &ModelConfig,
    template: &TrainConfig,
    samples: &[TimeSeriesSample],
    split: &DatasetSplit,
    eval: &EvalOptions,
    alpha: f64,
    seed: u64,
) -> Result<EvalReport, String> {
    let cfg = TrainConfig {
        alpha,
        seed,
        ..template.clone()
    };
    let state = train(model_cfg, &cfg, samples, split, None, &mut |_| {}).map_err(|e| e.to_string())?;
    let test: Vec<&TimeSeriesSample> = split.test.iter().map(|&i| &samples[i]).collect();
    evaluate(state.selected_params(), model_cfg, &test, eval)
        .map(|e| e.report)
        .map_err(|e| e.to_string())
}

/// Trains one model per (α, seed) with seeds `template.seed + k`, evaluates
/// each on the test split, and aggregates per α. A failing cell is recorded
/// and the sweep continues.
pub fn alpha_sweep(
    model_cfg: &ModelConfig,
    template: &TrainConfig,
    samples: &[TimeSeriesSample],
    split: &DatasetSplit,
    opts: &SweepOptions,
    on_cell: &(dyn Fn(&SweepCell) + Sync),
) -> Result<SweepResult, EvalError> {
    if opts.alphas.is_empty() {
        return Err(EvalError::Config("alpha list is empty".into()));
    }
    if let Some(a) = opts.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(EvalError::Config(format!("alpha {a} outside [0, 1]")));
    }
    if opts.seeds_per_alpha == 0 {
        return Err(EvalError::Config("seeds per alpha must be ≥ 1".into()));
    }
    if split.test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let jobs: Vec<(f64, u64)> = opts
        .alphas
        .iter()
        .flat_map(|&a| (0..opts.seeds_per_alpha).map(move |k| (a, template.seed + k as u64)))
        .collect();
    let slots: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(alpha, seed)) = jobs.get(i) else {
            break;
        };
        let outcome = run_cell(model_cfg, template, samples, split, &opts.eval, alpha, seed);
        let cell = SweepCell { alpha, seed, outcome };
        on_cell(&cell);
        slots.lock().expect("no worker panicked")[i] = Some(cell);
    };
    std::thread::scope(|scope| {
        for _ in 1..opts.threads.max(1) {
            scope.spawn(worker);
        }
        worker();
    });
    let cells: Vec<SweepCell> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();

    let rows = opts
        .alphas
        .iter()
        .map(|&alpha| {
            let reports: Vec<&EvalReport> = cells
                .iter()
                .filter(|c| c.alpha == alpha)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                alpha,
                accuracy: col(|r| r.accuracy.mean),
                tstop: col(|r| r.tstop.mean),
                precision: col(|r| r.precision.mean),
                recall: col(|r| r.recall.mean),
                f1: col(|r| r.f1.mean),
                kappa: col(|r| r.kappa.mean),
                failed: opts.seeds_per_alpha - reports.len(),
            }
        })
        .collect();
    Ok(SweepResult { cells, rows })
}

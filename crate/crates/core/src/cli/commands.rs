use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use super::config::RunConfig;
use super::{usage, CliError, EvalArgs, GenerateArgs, SplitArg, StopModeArg, SweepArgs, TraceArgs, TrainArgs};
use crate::data::{
    default_class_specs, generate as generate_samples, load_class_specs, load_dataset, mix_seed, save_class_specs,
    save_dataset, split_by_region, subsample, DatasetSplit, GeneratorConfig, TimeSeriesSample,
};
use crate::earliness::{stopping_distribution, LossMode, StopDecision};
use crate::eval::{alpha_sweep, evaluate, sweep_cells_csv, EvalOptions, StopMode, SweepOptions};
use crate::model::{forward, ModelCheckpoint};
use crate::train::{history_csv, TrainCheckpoint, TrainState};

const MODEL_FILE: &str = "model.json";
const STATE_FILE: &str = "train_state.json";
const HISTORY_FILE: &str = "history.csv";
const CONFIG_FILE: &str = "config.json";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::from)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let specs = match &a.classes {
        Some(p) => {
            require_file(p, "class catalogue")?;
            load_class_specs(p).map_err(usage)?
        }
        None => default_class_specs(),
    };
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "generator config")?;
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<GeneratorConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => GeneratorConfig::default(),
    };
    if let Some(v) = a.samples_per_class {
        cfg.samples_per_class = v;
    }
    if let Some(v) = a.regions {
        cfg.regions = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(usage)?;
    let samples = generate_samples(&specs, &cfg).map_err(usage)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(&a.out, &samples, specs[0].bands()).context("writing dataset")?;
    if let Some(p) = &a.write_classes {
        save_class_specs(p, &specs).context("writing class catalogue")?;
    }
    let mut regions: Vec<u32> = samples.iter().map(|s| s.region_id).collect();
    regions.sort_unstable();
    regions.dedup();
    println!(
        "wrote {} samples, {} classes, {} regions to {}",
        samples.len(),
        specs.len(),
        regions.len(),
        a.out.display()
    );
    Ok(())
}

fn load_samples(path: &Path, bands: usize) -> Result<Vec<TimeSeriesSample>, CliError> {
    require_file(path, "dataset")?;
    load_dataset(path, Some(bands)).map_err(|e| usage(format!("dataset {}: {e}", path.display())))
}

fn make_split(samples: &[TimeSeriesSample], cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let f = cfg.split.fractions;
    split_by_region(samples, (f[0], f[1], f[2]), cfg.split.seed).map_err(usage)
}

fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn run_metadata(cfg: &RunConfig, alpha_text: &str, dataset: &Path) -> Vec<(String, String)> {
    let t = &cfg.train;
    vec![
        ("alpha".into(), alpha_text.to_string()),
        (
            "loss_mode".into(),
            serde_json::to_value(t.loss_mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        ),
        ("seed".into(), t.seed.to_string()),
        ("sequence_length".into(), t.sequence_length.to_string()),
        ("split_seed".into(), cfg.split.seed.to_string()),
        ("split_fractions".into(), serde_json::to_string(&cfg.split.fractions).expect("array serializes")),
        ("dataset".into(), dataset.display().to_string()),
        ("run_config".into(), serde_json::to_string(cfg).expect("config serializes")),
    ]
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let (mut cfg, resumed, metadata_alpha) = match &a.resume {
        Some(path) => {
            require_file(path, "training state")?;
            let ckpt = TrainCheckpoint::load(path).map_err(usage)?;
            let stored = ckpt
                .metadata
                .get("run_config")
                .ok_or_else(|| usage(format!("{}: no run configuration recorded", path.display())))?;
            let mut cfg: RunConfig = serde_json::from_str(stored).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            cfg.model = ckpt.model_config.clone();
            cfg.train = ckpt.train_config.clone();
            let alpha = ckpt.metadata.get("alpha").cloned();
            (cfg, Some(ckpt), alpha)
        }
        None => (RunConfig::load_or_default(a.config.as_deref())?, None, None),
    };
    cfg.apply(&a.overrides);
    let alpha_text = match &a.alpha {
        Some(text) => {
            cfg.train.alpha = text
                .trim()
                .parse()
                .map_err(|_| usage(format!("--alpha: cannot parse {text:?} as a number")))?;
            text.clone()
        }
        None => metadata_alpha.unwrap_or_else(|| format_float(cfg.train.alpha)),
    };
    if let (Some(ckpt), Some(_)) = (&resumed, &a.alpha) {
        if ckpt.train_config.alpha != cfg.train.alpha {
            return Err(usage("--alpha cannot change when resuming"));
        }
    }
    cfg.validate()?;
    let dataset = cfg.dataset_path()?.to_path_buf();
    let init = match &a.init_from {
        Some(p) => {
            require_file(p, "initial checkpoint")?;
            let ckpt = ModelCheckpoint::load(p).map_err(usage)?;
            ckpt.params.check_shapes(&cfg.model).map_err(|e| usage(format!("--init-from {}: {e}", p.display())))?;
            Some(ckpt.params)
        }
        None => None,
    };
    let out_dir = RunConfig::resolve_output_dir(a.overrides.out_dir.as_deref(), cfg.output_dir.as_deref());
    ensure_dir(&out_dir)?;

    let samples = load_samples(&dataset, cfg.model.input_dim)?;
    let split = make_split(&samples, &cfg)?;
    eprintln!(
        "train {} / val {} / test {} samples; {} parameters",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        crate::model::ParameterSet::init(&cfg.model, 0).map_err(usage)?.num_parameters()
    );

    let mut metadata: Vec<(String, String)> = run_metadata(&cfg, &alpha_text, &dataset);
    if let Some(p) = &a.init_from {
        metadata.push(("init_from".into(), p.display().to_string()));
    }
    let state_path = out_dir.join(STATE_FILE);
    let snapshot = |state: &TrainState| {
        let mut ckpt = TrainCheckpoint::new(cfg.model.clone(), cfg.train.clone(), state.clone());
        ckpt.metadata.extend(metadata.iter().cloned());
        ckpt
    };

    let train_set: Vec<&TimeSeriesSample> = split.train.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&TimeSeriesSample> = split.val.iter().map(|&i| &samples[i]).collect();
    let mut state = match (resumed, init) {
        (Some(ckpt), _) => ckpt.state,
        (None, Some(params)) => TrainState::new(params),
        (None, None) => {
            if train_set.is_empty() {
                return Err(usage("training split is empty"));
            }
            crate::train::initial_state(&cfg.model, &cfg.train, &train_set).map_err(usage)?
        }
    };
    let started = std::time::Instant::now();
    let mut save_error = None;
    let result = crate::train::run_epochs(&mut state, &cfg.model, &cfg.train, &train_set, &val_set, &mut |m| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_acc {:.4}  val_tstop {:.4}  ({:.0?})",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.val_accuracy,
            m.val_mean_stop_fraction,
            started.elapsed()
        );
    });
    // The state after the last completed epoch is kept even on failure.
    let ckpt = snapshot(&state);
    if let Err(e) = ckpt.save(&state_path) {
        save_error = Some(e);
    }
    match result {
        Err(crate::train::TrainError::Config(msg)) => return Err(usage(msg)),
        Err(e) => return Err(anyhow::Error::new(e).context("training failed").into()),
        Ok(()) => {}
    }
    if let Some(e) = save_error {
        return Err(anyhow::Error::new(e).into());
    }
    let mut model = ckpt.model_checkpoint();
    if let Some(best) = state.best_epoch {
        model.metadata.insert("best_epoch".into(), best.to_string());
    }
    model.save(&out_dir.join(MODEL_FILE)).context("writing model checkpoint")?;
    write(&out_dir.join(HISTORY_FILE), &history_csv(&state.history))?;
    write(
        &out_dir.join(CONFIG_FILE),
        &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"),
    )?;
    println!(
        "wrote {} and {} to {} (best epoch {})",
        MODEL_FILE,
        HISTORY_FILE,
        out_dir.display(),
        state.best_epoch.map_or("-".to_string(), |e| e.to_string())
    );
    Ok(())
}

/// Split settings recorded at training time.
fn recorded_split(ckpt: &ModelCheckpoint) -> Option<RunConfig> {
    let fractions: [f64; 3] = serde_json::from_str(ckpt.metadata.get("split_fractions")?).ok()?;
    let seed: u64 = ckpt.metadata.get("split_seed")?.parse().ok()?;
    let mut cfg = RunConfig::default();
    cfg.split.fractions = fractions;
    cfg.split.seed = seed;
    Some(cfg)
}

fn recorded_loss_mode(ckpt: &ModelCheckpoint) -> LossMode {
    match ckpt.metadata.get("loss_mode").map(String::as_str) {
        Some("cross_entropy") => LossMode::CrossEntropy,
        _ => LossMode::EarlyReward,
    }
}

fn load_model(path: &Path) -> Result<ModelCheckpoint, CliError> {
    require_file(path, "checkpoint")?;
    ModelCheckpoint::load(path).map_err(usage)
}

fn class_names(path: Option<&Path>) -> Result<Option<Vec<String>>, CliError> {
    match path {
        Some(p) => {
            require_file(p, "class catalogue")?;
            Ok(Some(load_class_specs(p).map_err(usage)?.into_iter().map(|s| s.name).collect()))
        }
        None => Ok(None),
    }
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = load_model(&a.checkpoint)?;
    let names = class_names(a.classes.as_deref())?;
    let samples = load_samples(&a.dataset, ckpt.config.input_dim)?;
    let selected: Vec<&TimeSeriesSample> = match a.split {
        SplitArg::All => samples.iter().collect(),
        part => {
            let cfg = recorded_split(&ckpt).ok_or_else(|| {
                usage("checkpoint has no recorded split settings; use --split all")
            })?;
            let split = make_split(&samples, &cfg)?;
            let idx = match part {
                SplitArg::Train => &split.train,
                SplitArg::Val => &split.val,
                _ => &split.test,
            };
            idx.iter().map(|&i| &samples[i]).collect()
        }
    };
    if selected.is_empty() {
        return Err(usage("no samples to evaluate"));
    }
    let stop_mode = match a.stop_mode {
        Some(StopModeArg::Sampled) => StopMode::Sampled { seed: a.seed },
        Some(StopModeArg::Expected) => StopMode::Expected,
        Some(StopModeArg::Final) => StopMode::Final,
        None => match recorded_loss_mode(&ckpt) {
            LossMode::CrossEntropy => StopMode::Final,
            LossMode::EarlyReward => StopMode::Sampled { seed: a.seed },
        },
    };
    if a.repeats == 0 {
        return Err(usage("--repeats must be ≥ 1"));
    }
    let sequence_length = ckpt.metadata.get("sequence_length").and_then(|v| v.parse().ok());
    let opts = EvalOptions {
        stop_mode,
        repeats: a.repeats,
        sequence_length,
        subsample_seed: 0,
    };
    let default_dir = a.checkpoint.parent().map(Path::to_path_buf);
    let out_dir = RunConfig::resolve_output_dir(a.out_dir.as_deref(), default_dir.as_deref());
    ensure_dir(&out_dir)?;
    let result = evaluate(&ckpt.params, &ckpt.config, &selected, &opts).map_err(|e| match e {
        crate::eval::EvalError::Label { .. } | crate::eval::EvalError::Bands { .. } => usage(e),
        crate::eval::EvalError::Data(e) => usage(e),
        other => CliError::Runtime(other.into()),
    })?;
    let names = names.as_deref();
    let r = &result.report;
    write(&out_dir.join("eval_summary.csv"), &r.summary_csv())?;
    write(&out_dir.join("confusion.csv"), &result.confusion.to_csv(names))?;
    write(&out_dir.join("class_metrics.csv"), &r.class_metrics_csv(names))?;
    write(&out_dir.join("stop_stats.csv"), &r.stop_stats_csv(names))?;
    print!("{}", r.summary_text());
    println!("reports written to {}", out_dir.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.apply(&a.overrides);
    cfg.validate()?;
    if a.alphas.is_empty() {
        return Err(usage("--alphas needs at least one value"));
    }
    if let Some(x) = a.alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(usage(format!("alpha {x} outside [0, 1]")));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be ≥ 1"));
    }
    let dataset = cfg.dataset_path()?.to_path_buf();
    let out_dir = RunConfig::resolve_output_dir(a.overrides.out_dir.as_deref(), cfg.output_dir.as_deref());
    ensure_dir(&out_dir)?;
    let samples = load_samples(&dataset, cfg.model.input_dim)?;
    let split = make_split(&samples, &cfg)?;
    let stop_mode = match cfg.train.loss_mode {
        LossMode::CrossEntropy => StopMode::Final,
        LossMode::EarlyReward => StopMode::Sampled { seed: cfg.eval.seed },
    };
    let opts = SweepOptions {
        alphas: a.alphas.clone(),
        seeds_per_alpha: a.seeds,
        eval: EvalOptions {
            stop_mode,
            repeats: cfg.eval.repeats,
            sequence_length: Some(cfg.train.sequence_length),
            subsample_seed: cfg.eval.seed,
        },
        threads: a.threads.max(1),
    };
    let result = alpha_sweep(&cfg.model, &cfg.train, &samples, &split, &opts, &|cell| match &cell.outcome {
        Ok(r) => eprintln!(
            "alpha {} seed {}: accuracy {:.4}  tstop {:.4}  kappa {:.4}",
            cell.alpha, cell.seed, r.accuracy.mean, r.tstop.mean, r.kappa.mean
        ),
        Err(e) => eprintln!("alpha {} seed {}: failed: {e}", cell.alpha, cell.seed),
    })
    .map_err(usage)?;
    write(&out_dir.join("sweep.csv"), &result.to_csv())?;
    write(&out_dir.join("sweep_cells.csv"), &sweep_cells_csv(&result.cells))?;
    let mut table = String::from("alpha   accuracy        tstop           kappa           failed\n");
    for r in &result.rows {
        let _ = writeln!(
            table,
            "{:<7} {:.3} ± {:.3}   {:.3} ± {:.3}   {:.3} ± {:.3}   {}",
            r.alpha, r.accuracy.mean, r.accuracy.std, r.tstop.mean, r.tstop.std, r.kappa.mean, r.kappa.std, r.failed
        );
    }
    print!("{table}");
    println!("sweep written to {}", out_dir.join("sweep.csv").display());
    let failed: usize = result.rows.iter().map(|r| r.failed).sum();
    if failed == result.cells.len() {
        return Err(anyhow::anyhow!("every sweep cell failed").into());
    }
    Ok(())
}

pub fn trace(a: TraceArgs) -> Result<(), CliError> {
    let ckpt = load_model(&a.checkpoint)?;
    let samples = load_samples(&a.dataset, ckpt.config.input_dim)?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.sample_id)
        .ok_or_else(|| usage(format!("sample {} not found in {}", a.sample_id, a.dataset.display())))?;
    let sequence_length: Option<usize> = if a.full {
        None
    } else {
        ckpt.metadata.get("sequence_length").and_then(|v| v.parse().ok())
    };
    // Same fixed subsample as `eval`.
    let (x, days) = match sequence_length {
        Some(t) => {
            let sub = subsample(sample, t, mix_seed(&[0, sample.id])).map_err(usage)?;
            (sub.observations, sub.days)
        }
        None => (sample.observations.clone(), sample.days.clone()),
    };
    let tr = forward(&ckpt.params, &ckpt.config, &x, false, 0).context("forward pass")?;
    let dist = stopping_distribution(&tr.stop_probs).context("stopping distribution")?;
    let decision = StopDecision::sample(&tr, mix_seed(&[a.seed, 0, sample.id])).context("sampling stop")?;

    let classes = ckpt.config.num_classes;
    let mut out = String::from("t,day,p_t,P_t");
    for c in 0..classes {
        let _ = write!(out, ",yhat_{c}");
    }
    out.push_str(",stopped_flag\n");
    for t in 0..tr.len() {
        let _ = write!(out, "{t},{},{},{}", days[t], tr.stop_probs[t], dist.probs[t]);
        for v in tr.scores_at(t) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", u8::from(t == decision.t_stop));
    }
    match &a.out {
        Some(p) => {
            let dir: PathBuf = p.parent().map(Path::to_path_buf).unwrap_or_default();
            if !dir.as_os_str().is_empty() {
                ensure_dir(&dir)?;
            }
            write(p, &out)?;
            eprintln!(
                "sample {} (label {}): stopped at t={} (day {}), predicted {}",
                sample.id, sample.label, decision.t_stop, days[decision.t_stop], decision.label
            );
        }
        None => print!("{out}"),
    }
    Ok(())
}


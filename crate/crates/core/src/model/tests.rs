use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{check_gradients, Selection, Tape, Var};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        hidden_dim: 5,
        num_layers: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array {
    let data = (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    Array::new(t, d, data).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = small_cfg();
    let a = ParameterSet::init(&cfg, 42).unwrap();
    let b = ParameterSet::init(&cfg, 42).unwrap();
    let c = ParameterSet::init(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        let bits_x: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let bits_y: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_x, bits_y);
    }
}

#[test]
fn init_shapes_bounds_and_forget_bias() {
    let cfg = small_cfg();
    let p = ParameterSet::init(&cfg, 1).unwrap();
    p.check_shapes(&cfg).unwrap();
    let h = cfg.hidden_dim;
    let bound = 1.0 / (h as f64).sqrt();
    assert_eq!(p.layers[0].w_input.shape(), (3, 4 * h));
    assert_eq!(p.layers[1].w_input.shape(), (h, 4 * h));
    assert_eq!(p.class_weight.shape(), (h, 3));
    assert_eq!(p.stop_weight.shape(), (h, 1));
    for layer in &p.layers {
        assert!(layer.bias.data()[h..2 * h].iter().all(|&b| b == 1.0));
        assert!(layer.w_input.data().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn stop_bias_draws_center_on_configured_mean() {
    let cfg = ModelConfig {
        stop_bias_init_mean: -0.2,
        ..small_cfg()
    };
    let n = 1000;
    let mean = (0..n)
        .map(|s| ParameterSet::init(&cfg, s).unwrap().stop_bias.data()[0])
        .sum::<f64>()
        / n as f64;
    assert!((mean + 0.2).abs() <= 0.02, "mean {mean}");
}

#[test]
fn initial_stop_probability_favors_late_decisions() {
    // Monte-Carlo over 100 random sequences for each of 10 initializations.
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let seqs: Vec<Array> = (0..100).map(|_| random_seq(&mut rng, 12, 13)).collect();
    let refs: Vec<&Array> = seqs.iter().collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for seed in 0..10 {
        let params = ParameterSet::init(&cfg, seed).unwrap();
        for tr in predict(&params, &cfg, &refs).unwrap() {
            let free = &tr.stop_probs[..tr.len() - 1];
            sum += free.iter().sum::<f64>();
            n += free.len();
        }
    }
    let mean = sum / n as f64;
    assert!(mean < 0.02, "mean initial p_t {mean}");
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Array::ones(1, 3));
    let o = t.constant(Array::zeros(1, 3));

    let c = t.constant(Array::row(vec![4.0, 4.0, 4.0]));
    let y = layer_norm(&mut t, c, g, o).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    // mean 2, population variance 2/3
    let x = t.constant(Array::row(vec![1.0, 2.0, 3.0]));
    let y = layer_norm(&mut t, x, g, o).unwrap();
    let s = (2.0f64 / 3.0 + 1e-5).sqrt();
    let expected = [-1.0 / s, 0.0, 1.0 / s];
    for (a, b) in t.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = t.constant(random_seq(&mut rng, 4, 16));
    let g16 = t.constant(Array::ones(1, 16));
    let o16 = t.constant(Array::zeros(1, 16));
    let y = layer_norm(&mut t, r, g16, o16).unwrap();
    for row in t.value(y).data().chunks(16) {
        let m = row.iter().sum::<f64>() / 16.0;
        let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

fn layer_with(t: &mut Tape, h_in: usize, h: usize, w: f64, bias: Vec<f64>) -> params::LayerVars {
    params::LayerVars {
        w_input: t.constant(Array::filled(h_in, 4 * h, w)),
        w_recurrent: t.constant(Array::filled(h, 4 * h, w)),
        bias: t.constant(Array::row(bias)),
        norm_gain: t.constant(Array::ones(1, h)),
        norm_offset: t.constant(Array::zeros(1, h)),
    }
}

#[test]
fn lstm_cell_zero_weights_and_states_stay_zero() {
    let mut t = Tape::new();
    let layer = layer_with(&mut t, 2, 3, 0.0, vec![0.0; 12]);
    let x = t.constant(Array::row(vec![0.7, -1.1]));
    let z = t.constant(Array::zeros(1, 3));
    let (h, c) = lstm_cell(&mut t, x, z, z, &layer).unwrap();
    assert!(t.value(h).data().iter().all(|&v| v == 0.0));
    assert!(t.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_cell_saturated_forget_gate_carries_memory() {
    let h = 3;
    let mut bias = vec![0.0; 4 * h];
    bias[..h].fill(-1000.0); // input gate closed
    bias[h..2 * h].fill(1000.0); // forget gate open
    let mut t = Tape::new();
    let layer = layer_with(&mut t, 2, h, 0.0, bias);
    let x = t.constant(Array::row(vec![0.3, 0.9]));
    let h0 = t.constant(Array::row(vec![0.2, -0.4, 0.1]));
    let c_prev = vec![1.5, -0.25, 3.0];
    let c0 = t.constant(Array::row(c_prev.clone()));
    let (_, c) = lstm_cell(&mut t, x, h0, c0, &layer).unwrap();
    assert_eq!(t.value(c).data(), c_prev.as_slice());
}

fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step scalar LSTM, written independently of the tape.
fn reference_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w_in: &Array,
    w_rec: &Array,
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h = h_prev.len();
    let pre = |k: usize| {
        let mut s = bias[k];
        for (j, xj) in x.iter().enumerate() {
            s += xj * w_in.get(j, k);
        }
        for (j, hj) in h_prev.iter().enumerate() {
            s += hj * w_rec.get(j, k);
        }
        s
    };
    let mut h_out = vec![0.0; h];
    let mut c_out = vec![0.0; h];
    for u in 0..h {
        let i = sigmoid_ref(pre(u));
        let f = sigmoid_ref(pre(h + u));
        let g = pre(2 * h + u).tanh();
        let o = sigmoid_ref(pre(3 * h + u));
        c_out[u] = f * c_prev[u] + i * g;
        h_out[u] = o * c_out[u].tanh();
    }
    (h_out, c_out)
}

#[test]
fn lstm_cell_matches_scalar_reference() {
    let cfg = ModelConfig {
        input_dim: 4,
        hidden_dim: 6,
        num_layers: 1,
        ..small_cfg()
    };
    let params = ParameterSet::init(&cfg, 11).unwrap();
    let layer = &params.layers[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let h0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut t = Tape::new();
    let vars = ParamVars::register(&mut t, &params, false);
    let xv = t.constant(Array::row(x.clone()));
    let hv = t.constant(Array::row(h0.clone()));
    let cv = t.constant(Array::row(c0.clone()));
    let (h, c) = lstm_cell(&mut t, xv, hv, cv, &vars.layers[0]).unwrap();

    let (h_ref, c_ref) = reference_cell(
        &x,
        &h0,
        &c0,
        &layer.w_input,
        &layer.w_recurrent,
        layer.bias.data(),
    );
    for (a, b) in t.value(h).data().iter().zip(&h_ref) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in t.value(c).data().iter().zip(&c_ref) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_step_sequence_is_forced_terminal() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 2).unwrap();
    let x = Array::row(vec![0.1, 0.2, 0.3]);
    let trace = forward(&params, &cfg, &x, false, 0).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace.stop_probs[0], 1.0);
}

#[test]
fn forward_rejects_wrong_column_count() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 2).unwrap();
    let x = Array::zeros(4, 2);
    assert!(matches!(
        forward(&params, &cfg, &x, false, 0),
        Err(ModelError::Shape { expected: 3, got: 2, .. })
    ));
}

#[test]
fn forward_is_causal_and_deterministic() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let x = random_seq(&mut rng, 8, 3);
        let cut = rng.random_range(0..7);
        let mut y = x.clone();
        for t in cut + 1..8 {
            for d in 0..3 {
                y.set(t, d, rng.random_range(-5.0..5.0));
            }
        }
        let a = forward(&params, &cfg, &x, false, 0).unwrap();
        let b = forward(&params, &cfg, &y, false, 0).unwrap();
        assert_eq!(a, forward(&params, &cfg, &x, false, 0).unwrap());
        for t in 0..=cut {
            assert_eq!(a.scores_at(t), b.scores_at(t));
            assert_eq!(a.stop_probs[t], b.stop_probs[t]);
        }
        // also under dropout with a shared seed
        let ad = forward(&params, &cfg, &x, true, 17).unwrap();
        let bd = forward(&params, &cfg, &y, true, 17).unwrap();
        for t in 0..=cut {
            assert_eq!(ad.scores_at(t), bd.scores_at(t));
        }
    }
}

#[test]
fn trace_rows_are_distributions() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = random_seq(&mut rng, 6, 3);
        let tr = forward(&params, &cfg, &x, true, rng.random()).unwrap();
        for t in 0..tr.len() {
            let s: f64 = tr.scores_at(t).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!((0.0..=1.0).contains(&tr.stop_probs[t]));
        }
        assert_eq!(*tr.stop_probs.last().unwrap(), 1.0);
    }
}

#[test]
fn dropout_changes_training_outputs_only() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_seq(&mut rng, 5, 3);
    let eval = forward(&params, &cfg, &x, false, 1).unwrap();
    assert_eq!(eval, forward(&params, &cfg, &x, false, 2).unwrap());
    let a = forward(&params, &cfg, &x, true, 1).unwrap();
    let b = forward(&params, &cfg, &x, true, 2).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, forward(&params, &cfg, &x, true, 1).unwrap());
}

#[test]
fn predict_matches_single_forward() {
    let cfg = small_cfg();
    let params = ParameterSet::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<Array> = (0..5)
        .map(|i| random_seq(&mut rng, 3 + i % 2, 3))
        .collect();
    let refs: Vec<&Array> = seqs.iter().collect();
    let batch = predict(&params, &cfg, &refs).unwrap();
    for (x, tr) in seqs.iter().zip(&batch) {
        let single = forward(&params, &cfg, x, false, 0).unwrap();
        assert_eq!(single.len(), tr.len());
        for (a, b) in single.class_scores.data().iter().zip(tr.class_scores.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        dropout_rate: 0.0,
        ..small_cfg()
    };
    let mut params = ParameterSet::init(&cfg, 12).unwrap();
    params
        .set_normalization(vec![0.1, -0.2, 0.3], vec![1.5, 0.8, 1.1])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_seq(&mut rng, 4, 3);
    let arrays: Vec<Array> = params.tensors().into_iter().cloned().collect();
    let f = |t: &mut Tape, vars: &[Var]| -> Result<Var, ModelError> {
        let pv = ParamVars::from_vars(vars, cfg.num_layers)?;
        let out = forward_batch(t, &pv, &params, &cfg, &[&x], None)?;
        let mut acc = None;
        for (s, p) in out.class_scores.iter().zip(&out.stop_probs) {
            let picked = t.gather_cols(*s, &[1])?;
            let lp = t.log(picked)?;
            let term = t.mul(lp, *p)?;
            acc = Some(match acc {
                None => term,
                Some(a) => t.add(a, term)?,
            });
        }
        Ok(t.sum(acc.unwrap())?)
    };
    let report =
        check_gradients(f, &arrays, 1e-4, 1e-3, Selection::Sample { count: 60, seed: 3 }).unwrap();
    assert!(report.passed(), "worst {:?}", report.worst());
}

#[test]
fn checkpoint_round_trips_bytewise() {
    let cfg = small_cfg();
    let mut ckpt = ModelCheckpoint::new(cfg.clone(), ParameterSet::init(&cfg, 5).unwrap());
    ckpt.metadata.insert("alpha".into(), "0.6".into());
    let text = ckpt.to_json();
    let back = ModelCheckpoint::from_json(&text, "mem").unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_json(), text);
}

#[test]
fn checkpoint_rejects_version_and_truncation() {
    let cfg = small_cfg();
    let ckpt = ModelCheckpoint::new(cfg.clone(), ParameterSet::init(&cfg, 5).unwrap());
    let text = ckpt.to_json();
    let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
    assert!(matches!(
        ModelCheckpoint::from_json(&bumped, "mem"),
        Err(ModelError::Version { version: 99, .. })
    ));
    let truncated = &text[..text.len() / 2];
    assert!(matches!(
        ModelCheckpoint::from_json(truncated, "mem"),
        Err(ModelError::Parse { .. })
    ));
}

#[test]
fn config_validation_lists_problems() {
    let bad = ModelConfig {
        hidden_dim: 0,
        num_classes: 1,
        dropout_rate: 1.0,
        ..ModelConfig::default()
    };
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("hidden_dim") && msg.contains("num_classes") && msg.contains("dropout_rate"));
}

#[test]
fn normalization_std_is_floored() {
    let cfg = small_cfg();
    let mut p = ParameterSet::init(&cfg, 0).unwrap();
    p.set_normalization(vec![0.0; 3], vec![0.0, 2.0, 1e-12]).unwrap();
    assert_eq!(p.input_std, vec![STD_FLOOR, 2.0, STD_FLOOR]);
    assert!(p.set_normalization(vec![0.0; 2], vec![1.0; 2]).is_err());
}

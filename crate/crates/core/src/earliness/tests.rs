use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{check_gradients, Selection};
use crate::model::{forward_batch, ModelConfig, ModelError, ParamVars, ParameterSet};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn stopping_distribution_examples() {
    let d = stopping_distribution(&[1.0, 0.3, 0.9, 1.0]).unwrap();
    assert_eq!(d.probs, vec![1.0, 0.0, 0.0, 0.0]);
    let d = stopping_distribution(&[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(d.probs, vec![0.0, 0.0, 1.0]);
    let d = stopping_distribution(&[0.5, 0.5, 1.0]).unwrap();
    assert_eq!(d.probs, vec![0.5, 0.25, 0.25]);
}

#[test]
fn stopping_distribution_requires_forced_terminal() {
    assert!(matches!(
        stopping_distribution(&[0.5, 0.5, 0.9]),
        Err(EarlinessError::Terminal(v)) if v == 0.9
    ));
    assert!(matches!(stopping_distribution(&[]), Err(EarlinessError::Empty)));
    assert!(matches!(
        stopping_distribution(&[1.2, 1.0]),
        Err(EarlinessError::OutOfRange { index: 0, .. })
    ));
}

#[test]
fn classification_loss_examples() {
    assert_eq!(classification_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
    assert!(close(classification_loss(&[0.5, 0.5], 0).unwrap(), 0.693_147_180_559_945_3, 1e-15));
    let clamped = classification_loss(&[1.0, 0.0], 1).unwrap();
    assert!(close(clamped, 18.420_680_743_952_367, 1e-12));
    assert!(matches!(
        classification_loss(&[0.5, 0.5], 2),
        Err(EarlinessError::ClassIndex { class: 2, classes: 2 })
    ));
}

#[test]
fn earliness_reward_examples() {
    assert_eq!(earliness_reward(0, 10, 1.0), 1.0);
    assert_eq!(earliness_reward(10, 10, 0.7), 0.0);
    assert!(close(earliness_reward(5, 10, 0.8), 0.4, 1e-15));
}

#[test]
fn step_loss_examples() {
    let scores = [0.2, 0.5, 0.3];
    let ce = classification_loss(&scores, 1).unwrap();
    let r = earliness_reward(3, 7, 0.5);
    assert_eq!(step_loss(&scores, 1, 3, 7, &LossConfig::early_reward(1.0)).unwrap(), ce);
    assert_eq!(step_loss(&scores, 1, 3, 7, &LossConfig::early_reward(0.0)).unwrap(), -r);
    let v = step_loss(&scores, 1, 5, 10, &LossConfig::early_reward(0.6)).unwrap();
    assert!(close(v, 0.315_888_308_335_967_15, 1e-12));
    assert!(close(v, 0.3159, 5e-5));
}

#[test]
fn sequence_loss_with_one_hot_distribution_is_that_step() {
    let scores = vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.1, 0.9], vec![0.5, 0.5]];
    let cfg = LossConfig::early_reward(0.4);
    for t_star in 0..4 {
        let mut p = vec![0.0; 4];
        p[t_star] = 1.0;
        p[3] = 1.0;
        let trace = trace_from_parts(scores.clone(), p).unwrap();
        let expected = step_loss(&scores[t_star], 1, t_star, 4, &cfg).unwrap();
        assert_eq!(sequence_loss(&trace, 1, &cfg).unwrap(), expected);
    }
}

#[test]
fn baseline_loss_vanishes_for_certain_predictions() {
    let trace = trace_from_parts(vec![vec![0.0, 1.0]; 5], vec![0.3, 0.2, 0.9, 0.1, 1.0]).unwrap();
    assert_eq!(sequence_loss(&trace, 1, &LossConfig::cross_entropy()).unwrap(), 0.0);
}

#[test]
fn sequence_loss_composite_oracle() {
    // p = [0.2, 0.5, 1], ŷ⁺ = [0.3, 0.6, 0.9], α = 0.6, T = 3:
    // P = [0.2, 0.4, 0.4];
    // L_t = 0.6·(−ln ŷ⁺_t) − 0.4·ŷ⁺_t·(1 − t/3), evaluated independently.
    let trace = trace_from_parts(
        vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.1, 0.9]],
        vec![0.2, 0.5, 1.0],
    )
    .unwrap();
    let v = sequence_loss(&trace, 1, &LossConfig::early_reward(0.6)).unwrap();
    assert!(close(v, 0.156_361_409_980_828_43, 1e-12), "{v}");
}

#[test]
fn sample_stop_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_stop_index(&[1.0, 0.5, 1.0], &mut rng).unwrap(), 0);
    assert_eq!(sample_stop_index(&[0.0, 0.0, 0.0, 1.0], &mut rng).unwrap(), 3);
    // The terminal step fires even if the stored value were not exactly 1.
    assert_eq!(sample_stop_index(&[0.0, 0.0], &mut rng).unwrap(), 1);

    let trace = trace_from_parts(vec![vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.0, 1.0]).unwrap();
    let d = StopDecision::sample(&trace, 3).unwrap();
    assert_eq!((d.t_stop, d.label), (1, 1));
    assert_eq!(d.fraction(), 1.0);
    assert_eq!(StopDecision::sample(&trace, 3).unwrap(), d);
}

#[test]
fn sampled_stops_match_stopping_distribution() {
    let p = [0.5, 0.5, 1.0];
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[sample_stop_index(&p, &mut rng).unwrap()] += 1;
    }
    for (c, expected) in counts.iter().zip([0.5, 0.25, 0.25]) {
        assert!(close(*c as f64 / n as f64, expected, 0.01));
    }
}

#[test]
fn expected_stop_fraction_examples() {
    assert_eq!(expected_stop_fraction(&[1.0, 0.2, 1.0]).unwrap(), 0.0);
    assert_eq!(expected_stop_fraction(&[0.0, 0.0, 0.0, 1.0]).unwrap(), 1.0);
    assert!(close(expected_stop_fraction(&[0.5, 0.5, 1.0]).unwrap(), 0.375, 1e-15));
    assert_eq!(expected_stop_index(&[0.5, 0.5, 1.0]).unwrap(), 1);
}

#[test]
fn alpha_is_validated() {
    let trace = trace_from_parts(vec![vec![0.5, 0.5]], vec![1.0]).unwrap();
    assert!(matches!(
        sequence_loss(&trace, 0, &LossConfig::early_reward(1.5)),
        Err(EarlinessError::Alpha(_))
    ));
}

fn tiny_model() -> (ModelConfig, ParameterSet, Vec<Array>, Vec<usize>) {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden_dim: 4,
        num_layers: 2,
        num_classes: 3,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let params = ParameterSet::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let xs = (0..3)
        .map(|_| {
            let d = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
            Array::new(5, 3, d).unwrap()
        })
        .collect();
    (cfg, params, xs, vec![0, 2, 1])
}

#[test]
fn tape_loss_matches_scalar_loss() {
    let (cfg, params, xs, labels) = tiny_model();
    let refs: Vec<&Array> = xs.iter().collect();
    for loss_cfg in [
        LossConfig::early_reward(0.0),
        LossConfig::early_reward(0.35),
        LossConfig::early_reward(1.0),
        LossConfig::cross_entropy(),
    ] {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params, true);
        let out = forward_batch(&mut tape, &vars, &params, &cfg, &refs, None).unwrap();
        let loss = batch_sequence_loss(&mut tape, &out, &labels, &loss_cfg).unwrap();
        let traces = out.traces(&tape);
        let scalar: f64 = traces
            .iter()
            .zip(&labels)
            .map(|(tr, &y)| sequence_loss(tr, y, &loss_cfg).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!(close(tape.value(loss).item().unwrap(), scalar, 1e-12));

        let dist = batch_stopping_distribution(&mut tape, &out.stop_probs).unwrap();
        for (b, tr) in traces.iter().enumerate() {
            let expected = stopping_distribution(&tr.stop_probs).unwrap();
            for (t, v) in dist.iter().enumerate() {
                assert!(close(tape.value(*v).get(b, 0), expected.probs[t], 1e-15));
            }
        }
    }
}

#[test]
fn stopping_head_receives_gradient_through_distribution() {
    let (cfg, params, xs, labels) = tiny_model();
    let refs: Vec<&Array> = xs.iter().collect();
    let arrays: Vec<Array> = params.tensors().into_iter().cloned().collect();
    let n = arrays.len();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, ModelError> {
        let pv = ParamVars::from_vars(vars, cfg.num_layers)?;
        let out = forward_batch(tape, &pv, &params, &cfg, &refs, None)?;
        batch_sequence_loss(tape, &out, &labels, &LossConfig::early_reward(0.5))
            .map_err(|e| ModelError::Config(e.to_string()))
    };
    let report = check_gradients(f, &arrays, 1e-5, 1e-4, Selection::All).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    // stop_weight and stop_bias are the last two arrays
    let stop_grads: Vec<&_> = report.entries.iter().filter(|e| e.param >= n - 2).collect();
    assert!(!stop_grads.is_empty());
    assert!(stop_grads.iter().any(|e| e.numeric.abs() > 1e-6 && e.analytic.abs() > 1e-6));

    // Cross entropy ignores the stopping head entirely.
    let g = |tape: &mut Tape, vars: &[Var]| -> Result<Var, ModelError> {
        let pv = ParamVars::from_vars(vars, cfg.num_layers)?;
        let out = forward_batch(tape, &pv, &params, &cfg, &refs, None)?;
        batch_sequence_loss(tape, &out, &labels, &LossConfig::cross_entropy())
            .map_err(|e| ModelError::Config(e.to_string()))
    };
    let report = check_gradients(g, &arrays, 1e-5, 1e-4, Selection::All).unwrap();
    assert!(report
        .entries
        .iter()
        .filter(|e| e.param >= n - 2)
        .all(|e| e.analytic == 0.0));
}

#[test]
fn alpha_one_is_weighted_pure_classification() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let len = rng.random_range(1..12);
        let mut p: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        p[len - 1] = 1.0;
        let scores: Vec<Vec<f64>> = (0..len)
            .map(|_| {
                let a: f64 = rng.random_range(0.01..1.0);
                vec![a, 1.0 - a]
            })
            .collect();
        let trace = trace_from_parts(scores.clone(), p.clone()).unwrap();
        let dist = stopping_distribution(&p).unwrap();
        let expected: f64 = dist
            .probs
            .iter()
            .zip(&scores)
            .map(|(w, s)| w * -s[0].ln())
            .sum();
        let v = sequence_loss(&trace, 0, &LossConfig::early_reward(1.0)).unwrap();
        assert!(close(v, expected, 1e-12));
    }
}

fn stop_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..80).prop_map(|mut p| {
        let last = p.len() - 1;
        p[last] = 1.0;
        p
    })
}

proptest! {
    #[test]
    fn stopping_distribution_sums_to_one(p in stop_vector()) {
        let d = stopping_distribution(&p).unwrap();
        prop_assert!((d.total() - 1.0).abs() <= 1e-6);
        prop_assert!(d.probs.iter().all(|&x| x >= 0.0));
        let f = expected_stop_fraction(&p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
    }

    #[test]
    fn step_loss_nonincreasing_in_correct_probability(
        alpha in 0.0f64..1.0,
        y1 in 0.0f64..=1.0,
        y2 in 0.0f64..=1.0,
        len in 1usize..100,
        frac in 0.0f64..1.0,
    ) {
        let t = ((len as f64) * frac) as usize;
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        let cfg = LossConfig::early_reward(alpha);
        let a = step_loss(&[1.0 - lo, lo], 1, t, len, &cfg).unwrap();
        let b = step_loss(&[1.0 - hi, hi], 1, t, len, &cfg).unwrap();
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn reward_strictly_decreases_in_time(y in 1e-6f64..=1.0, len in 2usize..200, t in 0usize..199) {
        prop_assume!(t + 1 < len);
        prop_assert!(earliness_reward(t + 1, len, y) < earliness_reward(t, len, y));
    }
}

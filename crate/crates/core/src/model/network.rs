use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{LayerVars, ParamVars};
use super::{ModelConfig, ModelError, ParameterSet, PredictionTrace};
use crate::diffcore::{Array, DiffError, Tape, Var};

/// Samples per tape when running inference over many sequences.
const INFERENCE_CHUNK: usize = 64;

pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, offset: Var) -> Result<Var, DiffError> {
    tape.layer_norm(x, gain, offset)
}

/// One LSTM step for a batch: `x_in` is `B×H_in`, states are `B×H`.
pub(crate) fn lstm_cell(
    tape: &mut Tape,
    x_in: Var,
    h_prev: Var,
    c_prev: Var,
    layer: &LayerVars,
) -> Result<(Var, Var), DiffError> {
    let h = tape.value(c_prev).cols();
    let from_input = tape.matmul(x_in, layer.w_input)?;
    let from_state = tape.matmul(h_prev, layer.w_recurrent)?;
    let pre = tape.add(from_input, from_state)?;
    let gates = tape.add_row(pre, layer.bias)?;

    let i = tape.slice_cols(gates, 0, h)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(gates, h, h)?;
    let f = tape.sigmoid(f);
    let g = tape.slice_cols(gates, 2 * h, h)?;
    let g = tape.tanh(g);
    let o = tape.slice_cols(gates, 3 * h, h)?;
    let o = tape.sigmoid(o);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h_out = tape.mul(o, squashed)?;
    Ok((h_out, c))
}

/// Per-time-step outputs for a batch of sequences. `class_scores[t]` is
/// `B×M`, `stop_probs[t]` is `B×1`, with the last step forced to 1.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub class_scores: Vec<Var>,
    pub stop_probs: Vec<Var>,
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        self.class_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_scores.is_empty()
    }

    pub fn traces(&self, tape: &Tape) -> Vec<PredictionTrace> {
        let Some(&first) = self.class_scores.first() else {
            return Vec::new();
        };
        let (batch, classes) = tape.value(first).shape();
        let steps = self.len();
        (0..batch)
            .map(|b| {
                let mut scores = Array::zeros(steps, classes);
                let mut stops = Vec::with_capacity(steps);
                for t in 0..steps {
                    let row = tape.value(self.class_scores[t]).row_slice(b);
                    scores.data_mut()[t * classes..(t + 1) * classes].copy_from_slice(row);
                    stops.push(tape.value(self.stop_probs[t]).get(b, 0));
                }
                PredictionTrace {
                    class_scores: scores,
                    stop_probs: stops,
                }
            })
            .collect()
    }
}

fn check_batch(cfg: &ModelConfig, batch: &[&Array]) -> Result<usize, ModelError> {
    let Some(first) = batch.first() else {
        return Err(ModelError::EmptyInput);
    };
    let steps = first.rows();
    if steps == 0 {
        return Err(ModelError::EmptyInput);
    }
    for x in batch {
        if x.cols() != cfg.input_dim {
            return Err(ModelError::Shape {
                what: "observation columns".into(),
                expected: cfg.input_dim,
                got: x.cols(),
            });
        }
        if x.rows() != steps {
            return Err(ModelError::Shape {
                what: "sequence length within batch".into(),
                expected: steps,
                got: x.rows(),
            });
        }
    }
    Ok(steps)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Array::new(rows, cols, data).expect("sized")
}

/// Runs the network over a batch of equally long raw sequences.
///
/// Rows are standardized with the parameter set's input statistics, pass
/// through the recurrent stack (layer norm after each layer, dropout between
/// layers when `dropout` is given), and feed the softmax class head and the
/// sigmoid stopping head. Hidden and cell states start at zero.
pub fn forward_batch(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &[&Array],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutput, ModelError> {
    let steps = check_batch(cfg, batch)?;
    let b = batch.len();
    let h = cfg.hidden_dim;
    let d = cfg.input_dim;

    let zeros = tape.constant(Array::zeros(b, h));
    let mut hidden = vec![zeros; cfg.num_layers];
    let mut cell = vec![zeros; cfg.num_layers];
    let terminal = tape.constant(Array::ones(b, 1));

    let mut out = BatchOutput {
        class_scores: Vec::with_capacity(steps),
        stop_probs: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let mut rows = Vec::with_capacity(b * d);
        for x in batch {
            let raw = x.row_slice(t);
            rows.extend(
                raw.iter()
                    .zip(params.input_mean.iter().zip(&params.input_std))
                    .map(|(v, (m, s))| (v - m) / s),
            );
        }
        let mut input = tape.constant(Array::new(b, d, rows).expect("sized"));

        for (l, layer) in vars.layers.iter().enumerate() {
            let (h_new, c_new) = lstm_cell(tape, input, hidden[l], cell[l], layer)?;
            hidden[l] = h_new;
            cell[l] = c_new;
            let mut feat = if cfg.layer_norm {
                layer_norm(tape, h_new, layer.norm_gain, layer.norm_offset)?
            } else {
                h_new
            };
            if l + 1 < cfg.num_layers && cfg.dropout_rate > 0.0 {
                if let Some(rng) = dropout.as_deref_mut() {
                    let mask = tape.constant(dropout_mask(rng, b, h, cfg.dropout_rate));
                    feat = tape.mul(feat, mask)?;
                }
            }
            input = feat;
        }

        let logits = tape.matmul(input, vars.class_weight)?;
        let logits = tape.add_row(logits, vars.class_bias)?;
        out.class_scores.push(tape.softmax(logits)?);

        let stop = if t + 1 == steps {
            terminal
        } else {
            let z = tape.matmul(input, vars.stop_weight)?;
            let z = tape.add_row(z, vars.stop_bias)?;
            tape.sigmoid(z)
        };
        out.stop_probs.push(stop);
    }
    Ok(out)
}

/// Single-sequence forward pass producing a full-sequence trace
/// (`stop_probs[T−1] = 1`).
pub fn forward(
    params: &ParameterSet,
    cfg: &ModelConfig,
    x: &Array,
    training: bool,
    dropout_seed: u64,
) -> Result<PredictionTrace, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let dropout = training.then_some(&mut rng);
    let out = forward_batch(&mut tape, &vars, params, cfg, &[x], dropout)?;
    Ok(out.traces(&tape).remove(0))
}

/// Dropout-free inference over many sequences; sequences within a call may
/// have different lengths.
pub fn predict(
    params: &ParameterSet,
    cfg: &ModelConfig,
    xs: &[&Array],
) -> Result<Vec<PredictionTrace>, ModelError> {
    let mut traces: Vec<Option<PredictionTrace>> = vec![None; xs.len()];
    // Group by length so each tape sees a rectangular batch.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by_key(|&i| xs[i].rows());
    for group in order.chunk_by(|&a, &b| xs[a].rows() == xs[b].rows()) {
        for chunk in group.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, params, false);
            let batch: Vec<&Array> = chunk.iter().map(|&i| xs[i]).collect();
            let out = forward_batch(&mut tape, &vars, params, cfg, &batch, None)?;
            for (&i, trace) in chunk.iter().zip(out.traces(&tape)) {
                traces[i] = Some(trace);
            }
        }
    }
    Ok(traces.into_iter().map(|t| t.expect("every index filled")).collect())
}

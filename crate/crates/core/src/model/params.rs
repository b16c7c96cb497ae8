use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::diffcore::{Array, Tape, Var};

/// Floor applied to fitted per-band standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Weights of one recurrent layer. Gate blocks are laid out as `[i | f | g | o]`
/// along the columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    /// `H_in × 4H`
    pub w_input: Array,
    /// `H × 4H`
    pub w_recurrent: Array,
    /// `1 × 4H`
    pub bias: Array,
    /// `1 × H`
    pub norm_gain: Array,
    /// `1 × H`
    pub norm_offset: Array,
}

/// All weights of the network plus the (non-learnable) input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub layers: Vec<LstmLayer>,
    /// `H × M`
    pub class_weight: Array,
    /// `1 × M`
    pub class_bias: Array,
    /// `H × 1`
    pub stop_weight: Array,
    /// `1 × 1`
    pub stop_bias: Array,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Array::new(rows, cols, data).expect("sized")
}

impl ParameterSet {
    /// Uniform `±1/√H` weights, forget-gate bias 1, layer-norm identity, and
    /// a stopping bias drawn from `N(stop_bias_init_mean, stop_bias_init_std²)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let input = if l == 0 { cfg.input_dim } else { h };
            let mut bias = uniform(&mut rng, 1, 4 * h, bound);
            bias.data_mut()[h..2 * h].fill(1.0);
            layers.push(LstmLayer {
                w_input: uniform(&mut rng, input, 4 * h, bound),
                w_recurrent: uniform(&mut rng, h, 4 * h, bound),
                bias,
                norm_gain: Array::ones(1, h),
                norm_offset: Array::zeros(1, h),
            });
        }
        let class_weight = uniform(&mut rng, h, cfg.num_classes, bound);
        let class_bias = uniform(&mut rng, 1, cfg.num_classes, bound);
        let stop_weight = uniform(&mut rng, h, 1, bound);
        let normal = Normal::new(cfg.stop_bias_init_mean, cfg.stop_bias_init_std)
            .map_err(|e| ModelError::Config(format!("stop bias init: {e}")))?;
        let stop_bias = Array::scalar(normal.sample(&mut rng));
        Ok(Self {
            layers,
            class_weight,
            class_bias,
            stop_weight,
            stop_bias,
            input_mean: vec![0.0; cfg.input_dim],
            input_std: vec![1.0; cfg.input_dim],
        })
    }

    /// Installs per-band standardization statistics (std floored at
    /// [`STD_FLOOR`]).
    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<(), ModelError> {
        if mean.len() != self.input_mean.len() || std.len() != self.input_std.len() {
            return Err(ModelError::Shape {
                what: "normalization statistics".into(),
                expected: self.input_mean.len(),
                got: mean.len().min(std.len()),
            });
        }
        self.input_mean = mean;
        self.input_std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(())
    }

    /// Learnable arrays with stable names, in a fixed order shared by
    /// [`ParameterSet::tensors_mut`] and gradient collections.
    pub fn named_tensors(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::with_capacity(self.layers.len() * 5 + 4);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm{l}.w_input"), &layer.w_input));
            out.push((format!("lstm{l}.w_recurrent"), &layer.w_recurrent));
            out.push((format!("lstm{l}.bias"), &layer.bias));
            out.push((format!("lstm{l}.norm_gain"), &layer.norm_gain));
            out.push((format!("lstm{l}.norm_offset"), &layer.norm_offset));
        }
        out.push(("class_weight".into(), &self.class_weight));
        out.push(("class_bias".into(), &self.class_bias));
        out.push(("stop_weight".into(), &self.stop_weight));
        out.push(("stop_bias".into(), &self.stop_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Array> {
        self.named_tensors().into_iter().map(|(_, a)| a).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out: Vec<&mut Array> = Vec::with_capacity(self.layers.len() * 5 + 4);
        for layer in &mut self.layers {
            out.push(&mut layer.w_input);
            out.push(&mut layer.w_recurrent);
            out.push(&mut layer.bias);
            out.push(&mut layer.norm_gain);
            out.push(&mut layer.norm_offset);
        }
        out.push(&mut self.class_weight);
        out.push(&mut self.class_bias);
        out.push(&mut self.stop_weight);
        out.push(&mut self.stop_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|a| a.len()).sum()
    }

    /// Checks every array against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let reference = Self::init(cfg, 0)?;
        if self.layers.len() != reference.layers.len() {
            return Err(ModelError::Shape {
                what: "layer count".into(),
                expected: reference.layers.len(),
                got: self.layers.len(),
            });
        }
        for ((name, a), b) in self.named_tensors().into_iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        for (what, v) in [("input_mean", &self.input_mean), ("input_std", &self.input_std)] {
            if v.len() != cfg.input_dim {
                return Err(ModelError::Shape {
                    what: what.into(),
                    expected: cfg.input_dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Tape handles for one registration of a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub(crate) layers: Vec<LayerVars>,
    pub(crate) class_weight: Var,
    pub(crate) class_bias: Var,
    pub(crate) stop_weight: Var,
    pub(crate) stop_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
    pub norm_gain: Var,
    pub norm_offset: Var,
}

impl ParamVars {
    /// Records every learnable array on `tape`, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn register(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> Self {
        let mut leaf = |a: &Array| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                w_input: leaf(&l.w_input),
                w_recurrent: leaf(&l.w_recurrent),
                bias: leaf(&l.bias),
                norm_gain: leaf(&l.norm_gain),
                norm_offset: leaf(&l.norm_offset),
            })
            .collect();
        Self {
            layers,
            class_weight: leaf(&params.class_weight),
            class_bias: leaf(&params.class_bias),
            stop_weight: leaf(&params.stop_weight),
            stop_bias: leaf(&params.stop_bias),
        }
    }

    /// Rebuilds the handle structure from leaves registered in
    /// [`ParameterSet::named_tensors`] order.
    pub fn from_vars(vars: &[Var], num_layers: usize) -> Result<Self, ModelError> {
        let expected = num_layers * 5 + 4;
        if vars.len() != expected {
            return Err(ModelError::Shape {
                what: "parameter handles".into(),
                expected,
                got: vars.len(),
            });
        }
        let layers = vars[..num_layers * 5]
            .chunks(5)
            .map(|c| LayerVars {
                w_input: c[0],
                w_recurrent: c[1],
                bias: c[2],
                norm_gain: c[3],
                norm_offset: c[4],
            })
            .collect();
        let heads = &vars[num_layers * 5..];
        Ok(Self {
            layers,
            class_weight: heads[0],
            class_bias: heads[1],
            stop_weight: heads[2],
            stop_bias: heads[3],
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len() * 5 + 4);
        for l in &self.layers {
            out.extend([l.w_input, l.w_recurrent, l.bias, l.norm_gain, l.norm_offset]);
        }
        out.extend([
            self.class_weight,
            self.class_bias,
            self.stop_weight,
            self.stop_bias,
        ]);
        out
    }

    /// Gradients in [`ParameterSet::named_tensors`] order; leaves the backward
    /// pass never reached get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Array> {
        self.vars()
            .into_iter()
            .map(|v| {
                tape.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    Array::zeros(r, c)
                })
            })
            .collect()
    }
}

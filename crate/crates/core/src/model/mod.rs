//! The modified decoder, the stacked baseline and the parameter sharing
//! decoder pair (PSDP).

mod config;
mod count;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::{IdTensor, Tensor, TensorError};

pub use config::{ModelConfig, Variant, LAYER_NORM_EPS};
pub use count::{
    count_parameters, per_layer, sharing_ratio, unshared_counterpart, ParamBreakdown,
    STORED_BYTES_PER_PARAM,
};
pub use layers::{
    causal_mask, decoder_layer_forward, psdp_forward, self_attention, stacked_forward,
    AttentionMask,
};
pub use params::{layout, Init, LayerParams, ModelParams, ParamSpec, PsdpParams, StackedParams};

/// Standard deviation of weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} parameter tensors, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A configured model and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams<Tensor>,
}

/// Output of [`Model::forward`]: the logits and the tape handles of every
/// parameter, in declared order.
pub struct Forward {
    pub logits: Var,
    pub params: ModelParams<Var>,
}

impl Model {
    /// Weights ~ N(0, 0.02²), biases and norm shifts 0, norm scales 1.
    /// Leaves are drawn in declared order from one ChaCha8 stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = layout(&config).map(|spec| {
            let n = spec.numel();
            let data = match spec.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(spec.shape.clone(), data).expect("layout shapes are positive")
        });
        Ok(Self { config, params })
    }

    /// Wraps tensors given in declared order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        let expected = specs.leaves().len();
        if tensors.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                found: tensors.len(),
            });
        }
        for ((spec, t), name) in specs.leaves().iter().zip(&tensors).zip(specs.names()) {
            if spec.shape != t.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let params = specs.rebuild(tensors).expect("length checked");
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<Tensor> {
        &mut self.params
    }

    /// Number of `f64` elements actually allocated.
    pub fn num_parameters(&self) -> usize {
        self.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(|t| tape.leaf(t.clone()))
    }

    pub fn forward(&self, tape: &mut Tape, ids: &IdTensor) -> Result<Forward, ModelError> {
        let params = self.bind(tape);
        let logits = forward_bound(tape, ids, &params, &self.config)?;
        Ok(Forward { logits, params })
    }

    /// Inference-only logits `[B,T,V]`.
    pub fn logits(&self, ids: &IdTensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ids)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Runs the forward pass for already-bound parameters.
pub fn forward_bound(
    tape: &mut Tape,
    ids: &IdTensor,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let vocab = cfg.vocab_size;
    if let Some(&bad) = ids.data().iter().find(|&&id| id >= vocab) {
        return Err(TensorError::IndexOutOfRange { id: bad, size: vocab }.into());
    }
    match params {
        ModelParams::Psdp(p) => psdp_forward(tape, ids, p, cfg),
        ModelParams::Stacked(p) => stacked_forward(tape, ids, p, cfg),
    }
}

#[cfg(test)]
mod tests;

//! A small pre-norm decoder-only transformer with residual-stream capture,
//! per-layer intervention hooks, hand-written backpropagation and greedy
//! decoding.
//!
//! The residual stream at layer `l` is the output of block `l` (after both
//! the attention and MLP residual adds). Captures read it and hooks rewrite
//! it, at the same point.

mod backward;
pub(crate) mod checkpoint;
pub(crate) mod forward;
mod generate;
mod gradcheck;
mod hooks;
mod params;
mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, checkpoint_bytes};
pub use forward::{BatchOutput, ResidualCapture};
pub use generate::argmax_lowest;
pub use gradcheck::{grad_check, GradCheckReport};
pub use hooks::{InterventionHook, PositionFilter, ResidualEdit};
pub use params::{Params, Tensor};
pub use train::{
    heldout_ce, Example, TrainConfig, TrainReport, Trainer, TrainingMixture,
};

/// Scalar type the model computes in: `f32` for normal use, `f64` for
/// gradient checking.
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + Send
    + Sync
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            num_layers: 4,
            num_heads: 4,
            d_ff: 256,
            context_length: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.num_layers", self.num_layers),
            ("model.num_heads", self.num_heads),
            ("model.d_ff", self.d_ff),
            ("model.context_length", self.context_length),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be > 0"));
            }
        }
        if self.num_heads > 0 && self.d_model % self.num_heads != 0 {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    /// Like [`Model::new`] but also checks the vocabulary fits `required` ids.
    pub fn for_vocab(config: ModelConfig, required: usize) -> Result<Self> {
        if config.vocab_size < required {
            return Err(Error::Config(format!(
                "model.vocab_size ({}) is smaller than the corpus vocabulary ({required})",
                config.vocab_size
            )));
        }
        Self::new(config)
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.tensors.iter().map(|t| t.data.len()).sum()
    }
}

impl Model<f32> {
    /// SHA-256 of the checkpoint encoding.
    pub fn checksum(&self) -> String {
        crate::binio::sha256_hex(&checkpoint_bytes(self))
    }
}

#[cfg(test)]
mod tests;

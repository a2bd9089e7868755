// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer.

pub mod config;
pub mod forward;
pub mod io;
pub mod plant;
pub mod weights;

pub use config::{ModelConfig, DEFAULT_EPS_LN};
pub use forward::{
    embed, forward, forward_embeddings, forward_from_layer, forward_from_layer_with, forward_with,
    ForwardTrace, HeadTrace, Interventions, LayerTrace, ScoreAblation, MASK_VALUE,
};
pub use io::{decode_weights, encode_weights, load_weights, save_weights};
pub use weights::{init_random, BlockWeights, Weights};

use crate::diff::{Tape, TensorId};
use crate::error::Result;
use crate::rules::GradientRuleSet;
use crate::tensor::Tensor;

/// A recorded computation from post-embedding inputs to one scalar logit.
#[derive(Debug, Clone)]
pub struct LogitGraph {
    pub tape: Tape,
    pub input: TensorId,
    pub logit: TensorId,
}

impl LogitGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.logit).data()[0]
    }

    /// Gradient of the logit with respect to the inputs under `rules`.
    pub fn input_gradient(&self, rules: &GradientRuleSet) -> Result<Tensor> {
        let grads = self.tape.backward(self.logit, rules)?;
        Ok(grads.get_or_zeros(&self.tape, self.input))
    }
}

/// Anything that maps token embeddings to a scalar target logit.
pub trait LogitModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Post-embedding inputs `[seq, d]` for `tokens`.
    fn embed(&self, tokens: &[usize]) -> Result<Tensor>;

    /// Records the target logit as a function of `embeddings`.
    fn record(&self, embeddings: &Tensor, target: usize) -> Result<LogitGraph>;

    fn logit(&self, embeddings: &Tensor, target: usize) -> Result<f64> {
        Ok(self.record(embeddings, target)?.value())
    }
}

impl LogitModel for Weights {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        forward::embed(self, tokens)
    }

    fn record(&self, embeddings: &Tensor, target: usize) -> Result<LogitGraph> {
        let trace = forward_embeddings(self, embeddings)?;
        trace.target_logit(target)?;
        let mut tape = trace.tape;
        let last = tape.select(
            trace.logits,
            (trace.seq_len - 1) * self.config.vocab_size + target,
        )?;
        Ok(LogitGraph {
            tape,
            input: trace.input,
            logit: last,
        })
    }
}

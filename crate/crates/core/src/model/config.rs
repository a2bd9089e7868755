// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};

/// Default layer-norm epsilon, added to the variance.
pub const DEFAULT_EPS_LN: f64 = 1e-5;

/// Hyper-parameters of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Zero layers is allowed: embeddings go straight to the final norm.
    pub n_layers: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub eps_ln: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            n_layers: 2,
            d_mlp: 64,
            max_seq_len: 64,
            eps_ln: DEFAULT_EPS_LN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GimError::invalid(format!("{name} must be >= 1")));
        }
        if self.d_model < 2 {
            return Err(GimError::invalid("d_model must be >= 2 for layer norm"));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(GimError::invalid(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.eps_ln.is_finite() && self.eps_ln >= 0.0) {
            return Err(GimError::invalid("eps_ln must be finite and non-negative"));
        }
        Ok(())
    }
}

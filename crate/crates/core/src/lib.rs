// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient attribution for small decoder transformers.
//!
//! The crate bundles a reverse-mode tape whose backward rules are chosen per
//! call ([`GradientRuleSet`]), a toy transformer that records every
//! activation on that tape, token- and layer-level attribution methods
//! (gradient x input, integrated gradients, attribution patching and the
//! gradient interaction modifications), a detector for attention
//! self-repair, and comprehensiveness/sufficiency evaluation.

pub mod attribution;
pub mod data;
pub mod diff;
pub mod error;
pub mod faithfulness;
pub mod model;
pub mod rules;
pub mod self_repair;
pub mod tensor;

pub use error::{GimError, Result};
pub use rules::{GradientRuleSet, LayerNormRule, MultiplyRule, SoftmaxRule, DEFAULT_TEMPERATURE};
pub use tensor::Tensor;

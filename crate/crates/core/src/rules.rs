// SPDX-License-Identifier: MIT OR Apache-2.0

//! Backward-rule configuration.
//!
//! The forward pass is always the ordinary transformer computation. A
//! [`GradientRuleSet`] is chosen when the tape is differentiated and selects,
//! independently for each of the three interaction sites, whether to use the
//! exact derivative or a modified one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};

/// Default TSG temperature used by GIM.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Backward rule for softmax nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SoftmaxRule {
    Standard,
    /// Recompute the softmax at `forward_temperature * temperature` before
    /// applying the softmax Jacobian.
    TemperatureAdjusted {
        temperature: f64,
    },
}

/// Backward rule for layer normalization nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormRule {
    Standard,
    /// Treat the saved normalization factor as a constant.
    Freeze,
}

/// Backward rule for products of two activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplyRule {
    Standard,
    /// Divide the gradient reaching each of the two factors by 2.
    GradNorm,
}

/// Complete backward configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientRuleSet {
    pub softmax: SoftmaxRule,
    pub layernorm: LayerNormRule,
    pub multiply: MultiplyRule,
}

impl SoftmaxRule {
    /// Validated temperature-adjusted rule; `T < 1` (or non-finite) is rejected.
    pub fn temperature_adjusted(temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature < 1.0 {
            return Err(GimError::invalid(format!(
                "TSG temperature must be finite and >= 1, got {temperature}"
            )));
        }
        Ok(Self::TemperatureAdjusted { temperature })
    }

    /// Multiplier applied to the forward temperature when recomputing weights.
    pub fn temperature_factor(&self) -> f64 {
        match *self {
            Self::Standard => 1.0,
            Self::TemperatureAdjusted { temperature } => temperature,
        }
    }
}

impl GradientRuleSet {
    /// Exact gradients everywhere.
    pub const STANDARD: Self = Self {
        softmax: SoftmaxRule::Standard,
        layernorm: LayerNormRule::Standard,
        multiply: MultiplyRule::Standard,
    };

    /// TSG at `temperature`, layernorm freeze and grad norm.
    pub fn gim(temperature: f64) -> Result<Self> {
        Ok(Self {
            softmax: SoftmaxRule::temperature_adjusted(temperature)?,
            layernorm: LayerNormRule::Freeze,
            multiply: MultiplyRule::GradNorm,
        })
    }

    /// Builds a rule set from the three switches; `tsg = None` keeps the
    /// standard softmax derivative.
    pub fn from_flags(tsg: Option<f64>, freeze: bool, grad_norm: bool) -> Result<Self> {
        Ok(Self {
            softmax: match tsg {
                Some(t) => SoftmaxRule::temperature_adjusted(t)?,
                None => SoftmaxRule::Standard,
            },
            layernorm: if freeze {
                LayerNormRule::Freeze
            } else {
                LayerNormRule::Standard
            },
            multiply: if grad_norm {
                MultiplyRule::GradNorm
            } else {
                MultiplyRule::Standard
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let SoftmaxRule::TemperatureAdjusted { temperature } = self.softmax {
            SoftmaxRule::temperature_adjusted(temperature)?;
        }
        Ok(())
    }
}

impl Default for GradientRuleSet {
    fn default() -> Self {
        Self::STANDARD
    }
}

impl fmt::Display for GradientRuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let SoftmaxRule::TemperatureAdjusted { temperature } = self.softmax {
            parts.push(format!("tsg={temperature}"));
        }
        if self.layernorm == LayerNormRule::Freeze {
            parts.push("ln-freeze".to_owned());
        }
        if self.multiply == MultiplyRule::GradNorm {
            parts.push("grad-norm".to_owned());
        }
        if parts.is_empty() {
            f.write_str("standard")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_below_one_is_rejected() {
        assert!(SoftmaxRule::temperature_adjusted(0.5).is_err());
        assert!(SoftmaxRule::temperature_adjusted(f64::NAN).is_err());
        assert!(GradientRuleSet::gim(0.99).is_err());
        assert!(GradientRuleSet::gim(1.0).is_ok());
    }

    #[test]
    fn display_names_active_modifications() {
        assert_eq!(GradientRuleSet::STANDARD.to_string(), "standard");
        assert_eq!(
            GradientRuleSet::gim(2.0).unwrap().to_string(),
            "tsg=2+ln-freeze+grad-norm"
        );
    }
}

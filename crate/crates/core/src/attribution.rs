// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level and layer-level attribution.
//!
//! Every score has the form `sum_d (x - x_cf)_d * alpha_d`, where `alpha` is
//! the gradient of the target logit under a [`GradientRuleSet`] (or its path
//! average for integrated gradients) and `x_cf` is a counterfactual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::model::{forward, forward_from_layer, LogitModel, Weights};
use crate::rules::{GradientRuleSet, SoftmaxRule, DEFAULT_TEMPERATURE};
use crate::tensor::Tensor;

/// Default number of integrated-gradient steps.
pub const DEFAULT_IG_STEPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TokenMethod {
    GradientXInput,
    IntegratedGradients {
        steps: usize,
        rules: GradientRuleSet,
    },
    Gim {
        temperature: f64,
    },
    Custom {
        rules: GradientRuleSet,
    },
}

impl TokenMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GradientXInput => "gxi",
            Self::IntegratedGradients { .. } => "ig",
            Self::Gim { .. } => "gim",
            Self::Custom { .. } => "custom",
        }
    }

    pub fn rules(&self) -> Result<GradientRuleSet> {
        let rules = match *self {
            Self::GradientXInput => GradientRuleSet::STANDARD,
            Self::IntegratedGradients { steps, rules } => {
                if steps == 0 {
                    return Err(GimError::invalid("integrated gradients needs steps >= 1"));
                }
                rules
            }
            Self::Gim { temperature } => GradientRuleSet::gim(temperature)?,
            Self::Custom { rules } => rules,
        };
        rules.validate()?;
        Ok(rules)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: String,
    pub rules: GradientRuleSet,
    /// One score per input token.
    pub scores: Vec<f64>,
    /// Human-readable description of the counterfactual.
    pub baseline: String,
    pub baseline_token: usize,
    pub target: usize,
    pub tokens: Vec<usize>,
}

/// Per-row sum of `(x - x_cf) * alpha`.
fn row_scores(x: &Tensor, x_cf: &Tensor, alpha: &Tensor) -> Vec<f64> {
    let d = x.row_len();
    (0..x.n_rows())
        .map(|i| {
            let (a, b, g) = (x.row(i), x_cf.row(i), alpha.row(i));
            (0..d).map(|k| (a[k] - b[k]) * g[k]).sum()
        })
        .collect()
}

/// Midpoint-rule average of the gradient along the straight path `from -> to`.
fn path_gradient<F>(from: &Tensor, to: &Tensor, steps: usize, grad_at: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let grads: Vec<Tensor> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let t = (k as f64 + 0.5) / steps as f64;
            grad_at(&from.zip_map(to, |a, b| a + t * (b - a))?)
        })
        .collect::<Result<_>>()?;
    let mut total = Tensor::zeros(from.shape());
    for g in &grads {
        total.add_assign(g);
    }
    Ok(total.scale(1.0 / steps as f64))
}

/// Token attribution with the baseline token placed at every position.
pub fn attribute_tokens<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: usize,
    method: &TokenMethod,
    baseline_token: usize,
) -> Result<AttributionResult> {
    let rules = method.rules()?;
    if baseline_token >= model.vocab_size() {
        return Err(GimError::invalid(format!(
            "baseline token {baseline_token} outside the vocabulary of {}",
            model.vocab_size()
        )));
    }
    let x = model.embed(tokens)?;
    let x_cf = model.embed(&vec![baseline_token; tokens.len()])?;
    let grad_at = |e: &Tensor| model.record(e, target)?.input_gradient(&rules);
    let alpha = match *method {
        TokenMethod::IntegratedGradients { steps, .. } => path_gradient(&x_cf, &x, steps, grad_at)?,
        _ => grad_at(&x)?,
    };
    Ok(AttributionResult {
        method: method.name().to_owned(),
        rules,
        scores: row_scores(&x, &x_cf, &alpha),
        baseline: format!("token {baseline_token} at every position"),
        baseline_token,
        target,
        tokens: tokens.to_vec(),
    })
}

pub fn gradient_x_input<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: usize,
    baseline_token: usize,
) -> Result<AttributionResult> {
    attribute_tokens(
        model,
        tokens,
        target,
        &TokenMethod::GradientXInput,
        baseline_token,
    )
}

pub fn integrated_gradients<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: usize,
    steps: usize,
    baseline_token: usize,
    rules: GradientRuleSet,
) -> Result<AttributionResult> {
    attribute_tokens(
        model,
        tokens,
        target,
        &TokenMethod::IntegratedGradients { steps, rules },
        baseline_token,
    )
}

pub fn gim<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[usize],
    target: usize,
    temperature: f64,
    baseline_token: usize,
) -> Result<AttributionResult> {
    attribute_tokens(
        model,
        tokens,
        target,
        &TokenMethod::Gim { temperature },
        baseline_token,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerMethod {
    Atp,
    /// Attribution patching with the temperature-adjusted softmax rule.
    AtpStar {
        temperature: f64,
    },
    IntegratedGradients {
        steps: usize,
    },
    Gim {
        temperature: f64,
    },
}

impl Default for LayerMethod {
    fn default() -> Self {
        Self::Gim {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LayerMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Atp => "atp",
            Self::AtpStar { .. } => "atp*",
            Self::IntegratedGradients { .. } => "ig",
            Self::Gim { .. } => "gim",
        }
    }

    pub fn rules(&self) -> Result<GradientRuleSet> {
        match *self {
            Self::Atp => Ok(GradientRuleSet::STANDARD),
            Self::AtpStar { temperature } => Ok(GradientRuleSet {
                softmax: SoftmaxRule::temperature_adjusted(temperature)?,
                ..GradientRuleSet::STANDARD
            }),
            Self::IntegratedGradients { steps } => {
                if steps == 0 {
                    return Err(GimError::invalid("integrated gradients needs steps >= 1"));
                }
                Ok(GradientRuleSet::STANDARD)
            }
            Self::Gim { temperature } => GradientRuleSet::gim(temperature),
        }
    }
}

/// Counterfactual representation for layer attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerCounterfactual {
    /// Mean over the positions of the same input.
    PositionalMean,
    /// One fixed vector per layer, e.g. a corpus mean.
    Provided { means: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttributionResult {
    pub method: String,
    pub rules: GradientRuleSet,
    /// `scores[layer][position]`, where layer `l` is the residual stream
    /// entering block `l`.
    pub scores: Vec<Vec<f64>>,
    pub counterfactual: String,
    pub target: usize,
    pub tokens: Vec<usize>,
}

/// Mean over rows, broadcast back to every row.
pub fn positional_mean(x: &Tensor) -> Tensor {
    let (n, d) = (x.n_rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let data = (0..n).flat_map(|_| mean.iter().copied()).collect();
    Tensor::from_parts(vec![n, d], data)
}

fn counterfactual_for(cf: &LayerCounterfactual, layer: usize, x: &Tensor) -> Result<Tensor> {
    match cf {
        LayerCounterfactual::PositionalMean => Ok(positional_mean(x)),
        LayerCounterfactual::Provided { means } => {
            let m = means.get(layer).ok_or_else(|| {
                GimError::invalid(format!("no counterfactual provided for layer {layer}"))
            })?;
            if m.len() != x.row_len() {
                return Err(GimError::invalid(format!(
                    "counterfactual for layer {layer} has width {}, expected {}",
                    m.len(),
                    x.row_len()
                )));
            }
            let data = (0..x.n_rows()).flat_map(|_| m.iter().copied()).collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        }
    }
}

/// Per-layer, per-position attribution against the positional mean.
pub fn layer_attribution(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    method: &LayerMethod,
) -> Result<LayerAttributionResult> {
    layer_attribution_with(
        weights,
        tokens,
        target,
        method,
        &LayerCounterfactual::PositionalMean,
    )
}

pub fn layer_attribution_with(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    method: &LayerMethod,
    counterfactual: &LayerCounterfactual,
) -> Result<LayerAttributionResult> {
    let rules = method.rules()?;
    let trace = forward(weights, tokens)?;
    let grads = trace.gradients(target, &rules)?;
    let mut scores = Vec::with_capacity(trace.layers.len());
    for (l, layer) in trace.layers.iter().enumerate() {
        let x = trace.value(layer.resid_pre);
        let x_cf = counterfactual_for(counterfactual, l, x)?;
        let alpha = match *method {
            LayerMethod::IntegratedGradients { steps } => {
                path_gradient(&x_cf, x, steps, |point| {
                    let t = forward_from_layer(weights, l, point)?;
                    let g = t.gradients(target, &rules)?;
                    Ok(g.get_or_zeros(&t.tape, t.input))
                })?
            }
            _ => grads.get_or_zeros(&trace.tape, layer.resid_pre),
        };
        scores.push(row_scores(x, &x_cf, &alpha));
    }
    let counterfactual = match counterfactual {
        LayerCounterfactual::PositionalMean => "per-layer positional mean".to_owned(),
        LayerCounterfactual::Provided { .. } => "provided per-layer mean".to_owned(),
    };
    Ok(LayerAttributionResult {
        method: method.name().to_owned(),
        rules,
        scores,
        counterfactual,
        target,
        tokens: tokens.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};

    fn model() -> Weights {
        let c = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            n_layers: 2,
            d_mlp: 8,
            max_seq_len: 16,
            eps_ln: 1e-5,
        };
        init_random(&c, 21).unwrap()
    }

    #[test]
    fn zero_steps_rejected() {
        let w = model();
        let err = integrated_gradients(&w, &[1, 2], 3, 0, 0, GradientRuleSet::STANDARD);
        assert!(matches!(err, Err(GimError::InvalidArgument(_))));
        let err = layer_attribution(
            &w,
            &[1, 2],
            3,
            &LayerMethod::IntegratedGradients { steps: 0 },
        );
        assert!(matches!(err, Err(GimError::InvalidArgument(_))));
    }

    #[test]
    fn gim_below_one_rejected() {
        assert!(gim(&model(), &[1, 2], 3, 0.5, 0).is_err());
    }

    #[test]
    fn bad_baseline_rejected() {
        assert!(gradient_x_input(&model(), &[1, 2], 3, 12).is_err());
    }

    #[test]
    fn positional_mean_broadcasts() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(positional_mean(&x).data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn layer_scores_have_model_shape() {
        let r = layer_attribution(&model(), &[1, 2, 3, 4], 5, &LayerMethod::Atp).unwrap();
        assert_eq!(r.scores.len(), 2);
        assert!(r.scores.iter().all(|row| row.len() == 4));
    }

    #[test]
    fn provided_counterfactual_width_checked() {
        let cf = LayerCounterfactual::Provided {
            means: vec![vec![0.0; 3], vec![0.0; 3]],
        };
        assert!(layer_attribution_with(&model(), &[1, 2], 3, &LayerMethod::Atp, &cf).is_err());
    }
}

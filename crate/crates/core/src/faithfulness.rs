// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comprehensiveness and sufficiency.
//!
//! Both metrics ablate features cumulatively in rank order and average the
//! drop `f(x) - f(perturbed)` over all `N` steps, normalized by `N * f(x)`.
//! Comprehensiveness removes the highest-scored features first (higher is
//! better); sufficiency removes the lowest-scored first (lower is better).
//! Ties rank the lower index first, so the metrics depend on scores only
//! through their order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_tokens, layer_attribution, positional_mean, LayerAttributionResult, LayerMethod,
    TokenMethod,
};
use crate::data::DatasetRecord;
use crate::error::{GimError, Result};
use crate::model::{forward, forward_from_layer, LogitModel, Weights};
use crate::rules::{GradientRuleSet, LayerNormRule, MultiplyRule, SoftmaxRule};
use crate::tensor::Tensor;

/// `|f(x)|` below this cannot normalize a curve.
pub const DEGENERATE_LOGIT: f64 = 1e-9;

/// Temperatures of the default sweep.
pub const SWEEP_TEMPERATURES: [f64; 8] = [1.0, 1.5, 2.0, 2.5, 3.0, 5.0, 10.0, 100.0];

/// A logit that can be re-evaluated with any subset of features ablated.
pub trait FeatureAblation: Sync {
    fn n_features(&self) -> usize;

    /// `f` with `ablated[i] == true` features replaced by their counterfactual.
    fn logit(&self, ablated: &[bool]) -> Result<f64>;
}

/// Replaces tokens with a baseline token.
pub struct TokenAblation<'a, M: LogitModel + ?Sized> {
    pub model: &'a M,
    pub tokens: &'a [usize],
    pub target: usize,
    pub baseline_token: usize,
}

impl<M: LogitModel + ?Sized> FeatureAblation for TokenAblation<'_, M> {
    fn n_features(&self) -> usize {
        self.tokens.len()
    }

    fn logit(&self, ablated: &[bool]) -> Result<f64> {
        let tokens: Vec<usize> = self
            .tokens
            .iter()
            .zip(ablated)
            .map(|(&t, &a)| if a { self.baseline_token } else { t })
            .collect();
        self.model.logit(&self.model.embed(&tokens)?, self.target)
    }
}

/// Replaces residual-stream rows entering `layer` with their positional mean.
pub struct LayerMeanAblation<'a> {
    weights: &'a Weights,
    target: usize,
    layer: usize,
    resid: Tensor,
    mean: Tensor,
}

impl<'a> LayerMeanAblation<'a> {
    pub fn new(
        weights: &'a Weights,
        tokens: &[usize],
        target: usize,
        layer: usize,
    ) -> Result<Self> {
        let trace = forward(weights, tokens)?;
        let l = trace.layer(layer).ok_or_else(|| {
            GimError::invalid(format!(
                "layer {layer} out of range for {} layers",
                weights.config.n_layers
            ))
        })?;
        let resid = trace.value(l.resid_pre).clone();
        let mean = positional_mean(&resid);
        Ok(Self {
            weights,
            target,
            layer,
            resid,
            mean,
        })
    }
}

impl FeatureAblation for LayerMeanAblation<'_> {
    fn n_features(&self) -> usize {
        self.resid.n_rows()
    }

    fn logit(&self, ablated: &[bool]) -> Result<f64> {
        let d = self.resid.row_len();
        let mut data = self.resid.data().to_vec();
        for (i, _) in ablated.iter().enumerate().filter(|(_, &a)| a) {
            data[i * d..(i + 1) * d].copy_from_slice(self.mean.row(i));
        }
        let x = Tensor::from_parts(self.resid.shape().to_vec(), data);
        forward_from_layer(self.weights, self.layer, &x)?.target_logit(self.target)
    }
}

/// Feature indices by descending score, ties to the lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Feature indices by ascending score, ties to the lower index.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

fn check_inputs(oracle: &dyn FeatureAblation, scores: &[f64]) -> Result<f64> {
    let n = oracle.n_features();
    if scores.len() != n {
        return Err(GimError::invalid(format!(
            "{} scores for {n} features",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GimError::invalid("scores must be finite"));
    }
    let fx = oracle.logit(&vec![false; n])?;
    if fx.abs() < DEGENERATE_LOGIT {
        return Err(GimError::DegenerateInput(format!(
            "|f(x)| = {:e} is below {DEGENERATE_LOGIT:e}",
            fx.abs()
        )));
    }
    Ok(fx)
}

/// `f(x) - f(x with order[..=i] ablated)` for every step `i`.
pub fn ablation_curve(oracle: &dyn FeatureAblation, fx: f64, order: &[usize]) -> Result<Vec<f64>> {
    let mut ablated = vec![false; oracle.n_features()];
    order
        .iter()
        .map(|&i| {
            ablated[i] = true;
            Ok(fx - oracle.logit(&ablated)?)
        })
        .collect()
}

fn normalized_mean(deltas: &[f64], fx: f64) -> f64 {
    deltas.iter().sum::<f64>() / (deltas.len() as f64 * fx)
}

pub fn comprehensiveness_of(oracle: &dyn FeatureAblation, scores: &[f64]) -> Result<f64> {
    let fx = check_inputs(oracle, scores)?;
    Ok(normalized_mean(
        &ablation_curve(oracle, fx, &rank_descending(scores))?,
        fx,
    ))
}

pub fn sufficiency_of(oracle: &dyn FeatureAblation, scores: &[f64]) -> Result<f64> {
    let fx = check_inputs(oracle, scores)?;
    Ok(normalized_mean(
        &ablation_curve(oracle, fx, &rank_ascending(scores))?,
        fx,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationMode {
    TokenBaseline { baseline_token: usize },
    LayerMean { layer: usize },
}

impl PerturbationMode {
    pub fn name(&self) -> String {
        match self {
            Self::TokenBaseline { baseline_token } => format!("token-baseline({baseline_token})"),
            Self::LayerMean { layer } => format!("layer-mean({layer})"),
        }
    }
}

fn with_oracle<T>(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    mode: PerturbationMode,
    f: impl FnOnce(&dyn FeatureAblation) -> Result<T>,
) -> Result<T> {
    match mode {
        PerturbationMode::TokenBaseline { baseline_token } => f(&TokenAblation {
            model: weights,
            tokens,
            target,
            baseline_token,
        }),
        PerturbationMode::LayerMean { layer } => {
            f(&LayerMeanAblation::new(weights, tokens, target, layer)?)
        }
    }
}

pub fn comprehensiveness(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    scores: &[f64],
    mode: PerturbationMode,
) -> Result<f64> {
    with_oracle(weights, tokens, target, mode, |o| {
        comprehensiveness_of(o, scores)
    })
}

pub fn sufficiency(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    scores: &[f64],
    mode: PerturbationMode,
) -> Result<f64> {
    with_oracle(weights, tokens, target, mode, |o| sufficiency_of(o, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: String,
    pub mode: String,
    pub n: usize,
    pub f_x: f64,
    /// Drops while removing the highest-scored features first.
    pub comprehensiveness_deltas: Vec<f64>,
    /// Drops while removing the lowest-scored features first.
    pub sufficiency_deltas: Vec<f64>,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
}

pub fn report_of(
    oracle: &dyn FeatureAblation,
    scores: &[f64],
    method: &str,
    mode: &str,
) -> Result<FaithfulnessReport> {
    let fx = check_inputs(oracle, scores)?;
    let comp = ablation_curve(oracle, fx, &rank_descending(scores))?;
    let suff = ablation_curve(oracle, fx, &rank_ascending(scores))?;
    Ok(FaithfulnessReport {
        method: method.to_owned(),
        mode: mode.to_owned(),
        n: scores.len(),
        f_x: fx,
        comprehensiveness: normalized_mean(&comp, fx),
        sufficiency: normalized_mean(&suff, fx),
        comprehensiveness_deltas: comp,
        sufficiency_deltas: suff,
    })
}

pub fn faithfulness_report(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    scores: &[f64],
    method: &str,
    mode: PerturbationMode,
) -> Result<FaithfulnessReport> {
    with_oracle(weights, tokens, target, mode, |o| {
        report_of(o, scores, method, &mode.name())
    })
}

/// One report per layer, perturbing that layer's residual stream.
pub fn layer_faithfulness(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    layer_scores: &LayerAttributionResult,
) -> Result<Vec<FaithfulnessReport>> {
    if layer_scores.scores.len() != weights.config.n_layers {
        return Err(GimError::invalid(format!(
            "{} layers of scores for a {}-layer model",
            layer_scores.scores.len(),
            weights.config.n_layers
        )));
    }
    layer_scores
        .scores
        .iter()
        .enumerate()
        .map(|(layer, scores)| {
            faithfulness_report(
                weights,
                tokens,
                target,
                scores,
                &layer_scores.method,
                PerturbationMode::LayerMean { layer },
            )
        })
        .collect()
}

/// A subset of the three gradient modifications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleCombination {
    /// Temperature of the softmax rule, when enabled.
    pub tsg: Option<f64>,
    pub freeze: bool,
    pub grad_norm: bool,
}

impl RuleCombination {
    pub const GXI: Self = Self {
        tsg: None,
        freeze: false,
        grad_norm: false,
    };

    pub fn rules(&self) -> Result<GradientRuleSet> {
        GradientRuleSet::from_flags(self.tsg, self.freeze, self.grad_norm)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.tsg {
            parts.push(format!("tsg={t}"));
        }
        if self.freeze {
            parts.push("ln-freeze".to_owned());
        }
        if self.grad_norm {
            parts.push("grad-norm".to_owned());
        }
        if parts.is_empty() {
            "gxi".to_owned()
        } else {
            parts.join("+")
        }
    }

    fn from_rules(rules: &GradientRuleSet) -> Self {
        Self {
            tsg: match rules.softmax {
                SoftmaxRule::Standard => None,
                SoftmaxRule::TemperatureAdjusted { temperature } => Some(temperature),
            },
            freeze: rules.layernorm == LayerNormRule::Freeze,
            grad_norm: rules.multiply == MultiplyRule::GradNorm,
        }
    }
}

/// All eight subsets, cumulative in the order TSG, freeze, grad-norm.
pub fn all_combinations(temperature: f64) -> Vec<RuleCombination> {
    (0..8u8)
        .map(|bits| RuleCombination {
            tsg: (bits & 1 != 0).then_some(temperature),
            freeze: bits & 2 != 0,
            grad_norm: bits & 4 != 0,
        })
        .collect()
}

/// Per-item token-level comprehensiveness and sufficiency under `rules`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub ids: Vec<String>,
    pub comprehensiveness: Vec<f64>,
    pub sufficiency: Vec<f64>,
    /// Ids skipped because `f(x)` was degenerate.
    pub skipped: Vec<String>,
}

impl ItemScores {
    pub fn mean_comprehensiveness(&self) -> f64 {
        mean(&self.comprehensiveness)
    }

    pub fn mean_sufficiency(&self) -> f64 {
        mean(&self.sufficiency)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates a token method over a dataset, in parallel, preserving order.
pub fn evaluate_tokens<M: LogitModel + ?Sized>(
    model: &M,
    dataset: &[DatasetRecord],
    method: &TokenMethod,
    baseline_token: usize,
) -> Result<ItemScores> {
    let results: Vec<Result<Option<(f64, f64)>>> = dataset
        .par_iter()
        .map(|r| {
            let attr = attribute_tokens(model, &r.tokens, r.target_token, method, baseline_token)?;
            let oracle = TokenAblation {
                model,
                tokens: &r.tokens,
                target: r.target_token,
                baseline_token,
            };
            match report_of(&oracle, &attr.scores, method.name(), "token-baseline") {
                Ok(rep) => Ok(Some((rep.comprehensiveness, rep.sufficiency))),
                Err(GimError::DegenerateInput(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = ItemScores {
        ids: Vec::new(),
        comprehensiveness: Vec::new(),
        sufficiency: Vec::new(),
        skipped: Vec::new(),
    };
    for (r, res) in dataset.iter().zip(results) {
        match res? {
            Some((c, s)) => {
                out.ids.push(r.id.clone());
                out.comprehensiveness.push(c);
                out.sufficiency.push(s);
            }
            None => out.skipped.push(r.id.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub combination: String,
    pub rules: GradientRuleSet,
    pub mean_comprehensiveness: f64,
    pub mean_sufficiency: f64,
    /// Relative to the plain gradient-times-input row.
    pub delta_comprehensiveness: f64,
    pub delta_sufficiency: f64,
    pub items: ItemScores,
}

/// Mean faithfulness of each rule combination, with deltas against GxI.
pub fn ablation_study<M: LogitModel + ?Sized>(
    model: &M,
    dataset: &[DatasetRecord],
    combinations: &[RuleCombination],
    baseline_token: usize,
) -> Result<Vec<AblationRow>> {
    let gxi = evaluate_tokens(model, dataset, &TokenMethod::GradientXInput, baseline_token)?;
    let (gc, gs) = (gxi.mean_comprehensiveness(), gxi.mean_sufficiency());
    combinations
        .iter()
        .map(|combo| {
            let rules = combo.rules()?;
            let items = if rules == GradientRuleSet::STANDARD {
                gxi.clone()
            } else {
                evaluate_tokens(
                    model,
                    dataset,
                    &TokenMethod::Custom { rules },
                    baseline_token,
                )?
            };
            let (c, s) = (items.mean_comprehensiveness(), items.mean_sufficiency());
            Ok(AblationRow {
                combination: RuleCombination::from_rules(&rules).name(),
                rules,
                mean_comprehensiveness: c,
                mean_sufficiency: s,
                delta_comprehensiveness: c - gc,
                delta_sufficiency: s - gs,
                items,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub mean_comprehensiveness: f64,
    pub mean_sufficiency: f64,
    pub n_items: usize,
    pub n_skipped: usize,
}

/// GIM faithfulness at each temperature.
pub fn temperature_sweep<M: LogitModel + ?Sized>(
    model: &M,
    dataset: &[DatasetRecord],
    temperatures: &[f64],
    baseline_token: usize,
) -> Result<Vec<SweepRow>> {
    temperatures
        .iter()
        .map(|&temperature| {
            let items = evaluate_tokens(
                model,
                dataset,
                &TokenMethod::Gim { temperature },
                baseline_token,
            )?;
            Ok(SweepRow {
                temperature,
                mean_comprehensiveness: items.mean_comprehensiveness(),
                mean_sufficiency: items.mean_sufficiency(),
                n_items: items.ids.len(),
                n_skipped: items.skipped.len(),
            })
        })
        .collect()
}

/// Mean of `a - b` with a percentile bootstrap interval over paired items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub resamples: usize,
}

pub fn paired_bootstrap(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapInterval> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GimError::invalid(
            "bootstrap needs two non-empty paired samples",
        ));
    }
    if resamples == 0 || !(confidence > 0.0 && confidence < 1.0) {
        return Err(GimError::invalid(
            "bootstrap needs resamples >= 1 and confidence in (0, 1)",
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(BootstrapInterval {
        mean: mean(&diffs),
        lower: pick(tail),
        upper: pick(1.0 - tail),
        confidence,
        resamples,
    })
}

/// Layer attribution followed by per-layer faithfulness.
pub fn circuit_reports(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    method: &LayerMethod,
) -> Result<(LayerAttributionResult, Vec<FaithfulnessReport>)> {
    let attr = layer_attribution(weights, tokens, target, method)?;
    let reports = layer_faithfulness(weights, tokens, target, &attr)?;
    Ok((attr, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        values: Vec<f64>,
        base: f64,
    }

    impl FeatureAblation for Fixed {
        fn n_features(&self) -> usize {
            self.values.len()
        }
        fn logit(&self, ablated: &[bool]) -> Result<f64> {
            Ok(self.base
                + self
                    .values
                    .iter()
                    .zip(ablated)
                    .filter(|(_, &a)| !a)
                    .map(|(v, _)| v)
                    .sum::<f64>())
        }
    }

    #[test]
    fn ranking_ties_go_to_lower_index() {
        assert_eq!(rank_descending(&[1.0, 3.0, 3.0, 0.0]), vec![1, 2, 0, 3]);
        assert_eq!(rank_ascending(&[1.0, 3.0, 3.0, 0.0]), vec![3, 0, 1, 2]);
    }

    #[test]
    fn additive_oracle_by_hand() {
        let o = Fixed {
            values: vec![1.0, 3.0],
            base: 0.0,
        };
        // f(x) = 4; top-first drops 3 then 4.
        let c = comprehensiveness_of(&o, &[0.0, 1.0]).unwrap();
        assert!((c - 7.0 / 8.0).abs() < 1e-15);
        let s = sufficiency_of(&o, &[0.0, 1.0]).unwrap();
        assert!((s - 5.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_logit() {
        let o = Fixed {
            values: vec![0.0, 0.0],
            base: 0.0,
        };
        assert!(matches!(
            comprehensiveness_of(&o, &[1.0, 2.0]),
            Err(GimError::DegenerateInput(_))
        ));
    }

    #[test]
    fn score_length_checked() {
        let o = Fixed {
            values: vec![1.0],
            base: 0.0,
        };
        assert!(comprehensiveness_of(&o, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eight_distinct_combinations() {
        let all = all_combinations(2.0);
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], RuleCombination::GXI);
        let names: std::collections::BTreeSet<String> = all.iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn bootstrap_on_constant_difference() {
        let a = vec![2.0; 10];
        let b = vec![1.0; 10];
        let ci = paired_bootstrap(&a, &b, 200, 0.95, 3).unwrap();
        assert_eq!((ci.mean, ci.lower, ci.upper), (1.0, 1.0, 1.0));
        assert!(paired_bootstrap(&a, &b[..3], 200, 0.95, 3).is_err());
    }
}

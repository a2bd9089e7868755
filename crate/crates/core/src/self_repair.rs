// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention self-repair detection and ablation comparisons.
//!
//! A self-repair case is an attention row where several positions carry
//! significant weight and contribute near-identical gradients `dz/ds_k`.
//! Removing one of them lets the softmax hand its mass to the others, so
//! individual ablations underestimate the joint effect and the standard
//! softmax gradient cancels.
//!
//! Effects are measured on the weighted gradient sum `sum_k g_k s_k` of the
//! row, with `g` held at its recorded value.

use serde::{Deserialize, Serialize};

use crate::diff::{softmax_backward, softmax_forward};
use crate::error::{GimError, Result};
use crate::model::{forward_with, ForwardTrace, Interventions, ScoreAblation, Weights, MASK_VALUE};
use crate::rules::{GradientRuleSet, SoftmaxRule};
use crate::tensor::Tensor;

/// Scores at or below this are treated as masked.
const MASKED_BELOW: f64 = -1e29;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Fraction of attention weights kept by importance.
    pub top_fraction: f64,
    /// `epsilon`: weights above this are significant.
    pub significance: f64,
    /// Rows with contribution CoV below this are emitted.
    pub cov_threshold: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.01,
            significance: 0.01,
            cov_threshold: 0.1,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.top_fraction > 0.0
            && self.top_fraction <= 1.0
            && self.significance >= 0.0
            && self.significance < 1.0
            && self.cov_threshold > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GimError::invalid(format!("bad detection config {self:?}")))
        }
    }
}

/// One causal attention row with its recorded gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Pre-softmax scores over keys `0..=query`.
    pub scores: Vec<f64>,
    /// Softmax weights over the same keys.
    pub weights: Vec<f64>,
    /// `dz/ds` over the same keys.
    pub grads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfRepairCase {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Positions with weight above the significance threshold.
    pub significant: Vec<usize>,
    /// Weights at `significant`.
    pub weights: Vec<f64>,
    /// Contributions `dz/ds_k` at `significant`.
    pub contributions: Vec<f64>,
    pub mean_contribution: f64,
    pub cov: f64,
    /// Full causal row, kept for ablation.
    pub row_scores: Vec<f64>,
    pub row_weights: Vec<f64>,
    pub row_grads: Vec<f64>,
}

/// Population standard deviation over absolute mean; `None` for a zero mean.
pub fn coefficient_of_variation(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return None;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean.abs())
}

/// Extracts every causal attention row of `trace` with all-standard `dz/ds`.
pub fn attention_rows(trace: &ForwardTrace, target: usize) -> Result<Vec<AttentionRow>> {
    let grads = trace.gradients(target, &GradientRuleSet::STANDARD)?;
    let mut rows = Vec::new();
    for layer in &trace.layers {
        for (h, head) in layer.heads.iter().enumerate() {
            let a = trace.value(head.scores);
            let s = trace.value(head.weights);
            let g = grads.get_or_zeros(&trace.tape, head.weights);
            for q in 0..trace.seq_len {
                rows.push(AttentionRow {
                    layer: layer.index,
                    head: h,
                    query: q,
                    scores: a.row(q)[..=q].to_vec(),
                    weights: s.row(q)[..=q].to_vec(),
                    grads: g.row(q)[..=q].to_vec(),
                });
            }
        }
    }
    Ok(rows)
}

/// Runs the detection pipeline on a trace.
pub fn detect(
    trace: &ForwardTrace,
    target: usize,
    config: &DetectionConfig,
) -> Result<Vec<SelfRepairCase>> {
    detect_rows(&attention_rows(trace, target)?, config)
}

/// Detection over explicit rows.
///
/// 1. Rank every weight by `|g_j s_j|` and keep the top fraction
///    (`max(1, ceil(N * top_fraction))` entries, ties to the earlier entry).
/// 2. Keep rows holding a kept entry and at least two weights above the
///    significance threshold.
/// 3. Emit rows whose contributions over the significant set have CoV below
///    the threshold.
pub fn detect_rows(rows: &[AttentionRow], config: &DetectionConfig) -> Result<Vec<SelfRepairCase>> {
    config.validate()?;
    let mut entries: Vec<(f64, usize)> = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        if row.weights.len() != row.grads.len() || row.weights.len() != row.scores.len() {
            return Err(GimError::invalid(format!(
                "row {r} has mismatched scores/weights/grads lengths"
            )));
        }
        for (g, s) in row.grads.iter().zip(&row.weights) {
            entries.push(((g * s).abs(), r));
        }
    }
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let keep =
        ((entries.len() as f64 * config.top_fraction).ceil() as usize).clamp(1, entries.len());
    // Stable sort keeps earlier entries first among equal importances.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0));
    let mut candidate = vec![false; rows.len()];
    for &e in &order[..keep] {
        candidate[entries[e].1] = true;
    }

    let mut cases = Vec::new();
    for (row, _) in rows.iter().zip(&candidate).filter(|(_, &c)| c) {
        let significant: Vec<usize> = (0..row.weights.len())
            .filter(|&k| row.weights[k] > config.significance)
            .collect();
        if significant.len() < 2 {
            continue;
        }
        let contributions: Vec<f64> = significant.iter().map(|&k| row.grads[k]).collect();
        let Some(cov) = coefficient_of_variation(&contributions) else {
            continue;
        };
        if cov < config.cov_threshold {
            let mean = contributions.iter().sum::<f64>() / contributions.len() as f64;
            cases.push(SelfRepairCase {
                layer: row.layer,
                head: row.head,
                query: row.query,
                weights: significant.iter().map(|&k| row.weights[k]).collect(),
                significant,
                contributions,
                mean_contribution: mean,
                cov,
                row_scores: row.scores.clone(),
                row_weights: row.weights.clone(),
                row_grads: row.grads.clone(),
            });
        }
    }
    Ok(cases)
}

impl SelfRepairCase {
    /// The two significant positions with the largest weights (earlier
    /// position first on ties), in ascending position order.
    pub fn ablation_pair(&self) -> (usize, usize) {
        let mut idx: Vec<usize> = (0..self.significant.len()).collect();
        idx.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]));
        let (a, b) = (self.significant[idx[0]], self.significant[idx[1]]);
        (a.min(b), a.max(b))
    }

    fn weighted_sum_after(&self, ablate: &[usize]) -> f64 {
        let mut scores = self.row_scores.clone();
        for &k in ablate {
            scores[k] += MASK_VALUE;
        }
        let n = scores.len();
        let s = softmax_forward(&Tensor::from_parts(vec![n], scores), 1.0)
            .expect("temperature 1 is valid");
        s.data()
            .iter()
            .zip(&self.row_grads)
            .map(|(s, g)| s * g)
            .sum()
    }

    fn weighted_sum(&self) -> f64 {
        self.row_weights
            .iter()
            .zip(&self.row_grads)
            .map(|(s, g)| s * g)
            .sum()
    }

    /// Effect of ablating `positions` on the weighted gradient sum.
    pub fn ablation_effect(&self, positions: &[usize]) -> f64 {
        self.weighted_sum() - self.weighted_sum_after(positions)
    }

    /// Individual effect of the first (`which == 1`) or second pair member.
    pub fn individual_ablation_effect(&self, which: u8) -> Result<f64> {
        let (a, b) = self.ablation_pair();
        match which {
            1 => Ok(self.ablation_effect(&[a])),
            2 => Ok(self.ablation_effect(&[b])),
            _ => Err(GimError::invalid("`which` must be 1 or 2")),
        }
    }

    pub fn joint_ablation_effect(&self) -> f64 {
        let (a, b) = self.ablation_pair();
        self.ablation_effect(&[a, b])
    }

    /// Linear estimate of the joint effect from score gradients under `rule`.
    ///
    /// Each ablated score is taken down to the lowest unmasked score of the
    /// row, so the estimate is `sum_j da_j/dz * (a_j - a_min)`.
    pub fn linear_estimate(&self, rule: SoftmaxRule) -> Result<f64> {
        let n = self.row_scores.len();
        let scores = Tensor::from_parts(vec![n], self.row_scores.clone());
        let g = Tensor::from_parts(vec![n], self.row_grads.clone());
        let grad = softmax_backward(&scores, &g, rule, 1.0)?;
        let floor = self
            .row_scores
            .iter()
            .copied()
            .filter(|&a| a > MASKED_BELOW)
            .fold(f64::INFINITY, f64::min);
        let (a, b) = self.ablation_pair();
        Ok([a, b]
            .iter()
            .map(|&j| grad.data()[j] * (self.row_scores[j] - floor))
            .sum())
    }

    pub fn gradient_estimate(&self) -> f64 {
        self.linear_estimate(SoftmaxRule::Standard)
            .expect("standard rule is always valid")
    }

    pub fn tsg_estimate(&self, temperature: f64) -> Result<f64> {
        self.linear_estimate(SoftmaxRule::temperature_adjusted(temperature)?)
    }

    /// All four quantities for the scatter report.
    pub fn compare(&self, temperature: f64) -> Result<AblationComparison> {
        Ok(AblationComparison {
            individual: [
                self.individual_ablation_effect(1)?,
                self.individual_ablation_effect(2)?,
            ],
            joint: self.joint_ablation_effect(),
            gradient_estimate: self.gradient_estimate(),
            tsg_estimate: self.tsg_estimate(temperature)?,
        })
    }

    /// Largest relative deviation of a contribution from the mean.
    pub fn max_relative_deviation(&self) -> f64 {
        let c = self.mean_contribution;
        self.contributions
            .iter()
            .map(|g| (g - c).abs() / c.abs())
            .fold(0.0, f64::max)
    }

    /// Attention mass outside the significant set.
    pub fn outside_mass(&self) -> f64 {
        1.0 - self.weights.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationComparison {
    pub individual: [f64; 2],
    pub joint: f64,
    pub gradient_estimate: f64,
    pub tsg_estimate: f64,
}

impl AblationComparison {
    pub fn individual_sum(&self) -> f64 {
        self.individual[0] + self.individual[1]
    }
}

/// Effects on the target logit itself, from full forward passes with the
/// pair's scores ablated: `[first, second, joint]`.
pub fn full_forward_effects(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    case: &SelfRepairCase,
) -> Result<[f64; 3]> {
    let (a, b) = case.ablation_pair();
    let base = forward_with(weights, tokens, &Interventions::default())?.target_logit(target)?;
    let ablate = |keys: &[usize]| -> Result<f64> {
        let iv = Interventions {
            score_ablations: keys
                .iter()
                .map(|&key| ScoreAblation {
                    layer: case.layer,
                    head: case.head,
                    query: case.query,
                    key,
                })
                .collect(),
        };
        Ok(base - forward_with(weights, tokens, &iv)?.target_logit(target)?)
    };
    Ok([ablate(&[a])?, ablate(&[b])?, ablate(&[a, b])?])
}

/// One scatter-plot row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub id: String,
    pub layer: usize,
    pub head: usize,
    pub qpos: usize,
    pub d_indiv_sum: f64,
    pub d_joint: f64,
    pub grad_est: f64,
    pub tsg_est: f64,
    pub cov: f64,
}

pub const SCATTER_COLUMNS: [&str; 9] = [
    "id",
    "layer",
    "head",
    "qpos",
    "d_indiv_sum",
    "d_joint",
    "grad_est",
    "tsg_est",
    "cov",
];

pub fn scatter_row(
    id: impl Into<String>,
    case: &SelfRepairCase,
    cmp: &AblationComparison,
) -> ScatterRow {
    ScatterRow {
        id: id.into(),
        layer: case.layer,
        head: case.head,
        qpos: case.query,
        d_indiv_sum: cmp.individual_sum(),
        d_joint: cmp.joint,
        grad_est: cmp.gradient_estimate,
        tsg_est: cmp.tsg_estimate,
        cov: case.cov,
    }
}

/// CSV with a fixed header; an empty input yields the header alone.
pub fn scatter_csv(rows: &[ScatterRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCATTER_COLUMNS)
        .map_err(|e| GimError::Internal(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.layer.to_string(),
            r.head.to_string(),
            r.qpos.to_string(),
            r.d_indiv_sum.to_string(),
            r.d_joint.to_string(),
            r.grad_est.to_string(),
            r.tsg_est.to_string(),
            r.cov.to_string(),
        ])
        .map_err(|e| GimError::Internal(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| GimError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| GimError::Internal(e.to_string()))
}

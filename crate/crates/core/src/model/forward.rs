// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass of the toy decoder, recorded on a [`Tape`].
//!
//! Architecture (pre-norm, no biases):
//!
//! ```text
//! x0 = tok_embed[t] + pos_embed[p]
//! for each block:
//!     h  = LN(x) * ln1_gain
//!     q, k, v = h W_q, h W_k, h W_v            (split into heads)
//!     a  = q k^T / sqrt(d_head) + causal_mask  (attention scores)
//!     s  = softmax(a)                           (attention weights)
//!     o  = s v                                  (per-head output)
//!     x  = x + concat(o) W_o
//!     h2 = LN(x) * ln2_gain
//!     x  = x + (silu(h2 W_gate) * (h2 W_up)) W_down
//! logits = (LN(x) * ln_final_gain) W_unembed
//! ```
//!
//! The products `q k^T`, `s v` and `silu(gate) * up` are recorded as
//! interaction products so the grad-norm rule can find them.

use crate::diff::{Gradients, Tape, TensorId};
use crate::error::{GimError, Result};
use crate::model::weights::Weights;
use crate::rules::GradientRuleSet;
use crate::tensor::Tensor;

/// Additive score used to mask future positions and to ablate scores.
pub const MASK_VALUE: f64 = -1e30;

/// Forward temperature of every attention softmax.
pub const FORWARD_TEMPERATURE: f64 = 1.0;

/// Tape handles for one attention head.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub queries: TensorId,
    pub keys: TensorId,
    pub values: TensorId,
    /// Masked, scaled pre-softmax scores `[seq, seq]`.
    pub scores: TensorId,
    /// Softmax output `[seq, seq]`.
    pub weights: TensorId,
    pub output: TensorId,
}

/// Tape handles for one block.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub index: usize,
    /// Residual stream entering the block.
    pub resid_pre: TensorId,
    pub ln1: TensorId,
    pub heads: Vec<HeadTrace>,
    pub attn_out: TensorId,
    pub resid_mid: TensorId,
    pub ln2: TensorId,
    pub gate: TensorId,
    pub up: TensorId,
    pub mlp_out: TensorId,
    pub resid_post: TensorId,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tape: Tape,
    /// Input tokens, when the pass started from tokens.
    pub tokens: Option<Vec<usize>>,
    pub seq_len: usize,
    /// Index of the first executed block (non-zero when resuming mid-stack).
    pub first_layer: usize,
    /// Residual stream fed to `first_layer` (the embeddings when it is 0).
    pub input: TensorId,
    pub layers: Vec<LayerTrace>,
    pub ln_final: TensorId,
    pub logits: TensorId,
}

/// Pre-softmax score ablation: adds [`MASK_VALUE`] to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreAblation {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
}

/// Modifications applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Interventions {
    pub score_ablations: Vec<ScoreAblation>,
}

fn check_tokens(weights: &Weights, tokens: &[usize]) -> Result<()> {
    let c = &weights.config;
    if tokens.is_empty() || tokens.len() > c.max_seq_len {
        return Err(GimError::invalid(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t >= c.vocab_size) {
        return Err(GimError::invalid(format!(
            "token id {t} at position {i} is outside the vocabulary of {}",
            c.vocab_size
        )));
    }
    Ok(())
}

/// Post-embedding input `tok_embed[t] + pos_embed[p]`, `[seq, d_model]`.
pub fn embed(weights: &Weights, tokens: &[usize]) -> Result<Tensor> {
    check_tokens(weights, tokens)?;
    let d = weights.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (p, &t) in tokens.iter().enumerate() {
        data.extend(
            weights
                .tok_embed
                .row(t)
                .iter()
                .zip(weights.pos_embed.row(p))
                .map(|(a, b)| a + b),
        );
    }
    Ok(Tensor::from_parts(vec![tokens.len(), d], data))
}

pub fn forward(weights: &Weights, tokens: &[usize]) -> Result<ForwardTrace> {
    forward_with(weights, tokens, &Interventions::default())
}

pub fn forward_with(
    weights: &Weights,
    tokens: &[usize],
    interventions: &Interventions,
) -> Result<ForwardTrace> {
    check_tokens(weights, tokens)?;
    let mut tape = Tape::new();
    let tok = tape.leaf(weights.tok_embed.clone());
    let pos = tape.leaf(weights.pos_embed.clone());
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let te = tape.gather(tok, tokens)?;
    let pe = tape.gather(pos, &positions)?;
    let x = tape.add(te, pe)?;
    let mut trace = run_blocks(weights, tape, x, 0, interventions)?;
    trace.tokens = Some(tokens.to_vec());
    Ok(trace)
}

/// Runs the full stack on explicit post-embedding inputs `[seq, d_model]`.
pub fn forward_embeddings(weights: &Weights, embeddings: &Tensor) -> Result<ForwardTrace> {
    forward_from_layer(weights, 0, embeddings)
}

/// Resumes the stack at block `layer` with residual stream `resid`.
/// `layer == n_layers` runs only the final norm and unembedding.
pub fn forward_from_layer(weights: &Weights, layer: usize, resid: &Tensor) -> Result<ForwardTrace> {
    forward_from_layer_with(weights, layer, resid, &Interventions::default())
}

pub fn forward_from_layer_with(
    weights: &Weights,
    layer: usize,
    resid: &Tensor,
    interventions: &Interventions,
) -> Result<ForwardTrace> {
    let c = &weights.config;
    if layer > c.n_layers {
        return Err(GimError::invalid(format!(
            "layer {layer} out of range for {} layers",
            c.n_layers
        )));
    }
    match *resid.shape() {
        [n, d] if n >= 1 && n <= c.max_seq_len && d == c.d_model => {}
        _ => {
            return Err(GimError::invalid(format!(
                "residual of shape {:?} does not fit [1..={}, {}]",
                resid.shape(),
                c.max_seq_len,
                c.d_model
            )))
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(resid.clone());
    run_blocks(weights, tape, x, layer, interventions)
}

fn score_mask(n: usize, layer: usize, head: usize, interventions: &Interventions) -> Tensor {
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            mask[i * n + j] = MASK_VALUE;
        }
    }
    for a in &interventions.score_ablations {
        if a.layer == layer && a.head == head && a.query < n && a.key < n {
            mask[a.query * n + a.key] += MASK_VALUE;
        }
    }
    Tensor::from_parts(vec![n, n], mask)
}

fn run_blocks(
    weights: &Weights,
    mut tape: Tape,
    input: TensorId,
    first_layer: usize,
    interventions: &Interventions,
) -> Result<ForwardTrace> {
    let c = weights.config;
    let n = tape.value(input).shape()[0];
    let inv_sqrt = 1.0 / (c.d_head as f64).sqrt();
    let mut x = input;
    let mut layers = Vec::with_capacity(c.n_layers - first_layer);
    for (l, block) in weights.blocks.iter().enumerate().skip(first_layer) {
        let resid_pre = x;
        let g1 = tape.leaf(block.ln1_gain.clone());
        let n1 = tape.layernorm(x, c.eps_ln)?;
        let ln1 = tape.mul_rows(n1, g1)?;
        let wq = tape.leaf(block.w_q.clone());
        let wk = tape.leaf(block.w_k.clone());
        let wv = tape.leaf(block.w_v.clone());
        let q_all = tape.linear(ln1, wq)?;
        let k_all = tape.linear(ln1, wk)?;
        let v_all = tape.linear(ln1, wv)?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let start = h * c.d_head;
            let queries = tape.slice_cols(q_all, start, c.d_head)?;
            let keys = tape.slice_cols(k_all, start, c.d_head)?;
            let values = tape.slice_cols(v_all, start, c.d_head)?;
            let kt = tape.transpose(keys)?;
            let raw = tape.interaction_matmul(queries, kt)?;
            let scaled = tape.scale(raw, inv_sqrt)?;
            let scores = tape.add_const(scaled, score_mask(n, l, h, interventions))?;
            let weights_id = tape.softmax(scores, FORWARD_TEMPERATURE)?;
            let output = tape.interaction_matmul(weights_id, values)?;
            heads.push(HeadTrace {
                queries,
                keys,
                values,
                scores,
                weights: weights_id,
                output,
            });
        }
        let outputs: Vec<TensorId> = heads.iter().map(|h| h.output).collect();
        let cat = tape.concat_cols(&outputs)?;
        let wo = tape.leaf(block.w_o.clone());
        let attn_out = tape.linear(cat, wo)?;
        let resid_mid = tape.add(x, attn_out)?;

        let g2 = tape.leaf(block.ln2_gain.clone());
        let n2 = tape.layernorm(resid_mid, c.eps_ln)?;
        let ln2 = tape.mul_rows(n2, g2)?;
        let wg = tape.leaf(block.w_gate.clone());
        let wu = tape.leaf(block.w_up.clone());
        let wd = tape.leaf(block.w_down.clone());
        let gate = tape.linear(ln2, wg)?;
        let up = tape.linear(ln2, wu)?;
        let act = tape.silu(gate)?;
        let gated = tape.mul(act, up, true)?;
        let mlp_out = tape.linear(gated, wd)?;
        let resid_post = tape.add(resid_mid, mlp_out)?;
        x = resid_post;
        layers.push(LayerTrace {
            index: l,
            resid_pre,
            ln1,
            heads,
            attn_out,
            resid_mid,
            ln2,
            gate,
            up,
            mlp_out,
            resid_post,
        });
    }
    let gf = tape.leaf(weights.ln_final_gain.clone());
    let nf = tape.layernorm(x, c.eps_ln)?;
    let ln_final = tape.mul_rows(nf, gf)?;
    let wu = tape.leaf(weights.unembed.clone());
    let logits = tape.linear(ln_final, wu)?;
    Ok(ForwardTrace {
        tape,
        tokens: None,
        seq_len: n,
        first_layer,
        input,
        layers,
        ln_final,
        logits,
    })
}

impl ForwardTrace {
    pub fn value(&self, id: TensorId) -> &Tensor {
        self.tape.value(id)
    }

    /// Logits `[seq, vocab]`.
    pub fn logits(&self) -> &Tensor {
        self.value(self.logits)
    }

    fn check_target(&self, target: usize) -> Result<()> {
        let vocab = self.logits().row_len();
        if target >= vocab {
            return Err(GimError::invalid(format!(
                "target {target} outside the vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    /// `z`: the target's logit at the last position.
    pub fn target_logit(&self, target: usize) -> Result<f64> {
        self.check_target(target)?;
        Ok(self.logits().at(self.seq_len - 1, target))
    }

    /// Argmax of the last-position logits (lowest id on ties).
    pub fn predicted_token(&self) -> usize {
        let row = self.logits().row(self.seq_len - 1);
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }

    /// Gradients of `z` under `rules` for every recorded value.
    pub fn gradients(&self, target: usize, rules: &GradientRuleSet) -> Result<Gradients> {
        self.check_target(target)?;
        let vocab = self.logits().row_len();
        let mut seed = Tensor::zeros(self.logits().shape());
        seed.data_mut()[(self.seq_len - 1) * vocab + target] = 1.0;
        self.tape.backward_from(self.logits, seed, rules)
    }

    /// Layer trace for absolute block index `layer`.
    pub fn layer(&self, layer: usize) -> Option<&LayerTrace> {
        layer
            .checked_sub(self.first_layer)
            .and_then(|i| self.layers.get(i))
    }

    /// Attention weights `[seq, seq]` of `(layer, head)`.
    pub fn attention_weights(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.layer(layer)
            .and_then(|l| l.heads.get(head))
            .map(|h| self.value(h.weights))
    }

    /// Saved sigmas of a layer-norm output, one per position.
    pub fn layernorm_sigmas(&self, ln_output: TensorId) -> Option<&[f64]> {
        // The gain multiply sits between the normalization and `ln_output`.
        let node = self.tape.producer(ln_output)?;
        self.tape.saved_sigmas(node.inputs[0])
    }
}

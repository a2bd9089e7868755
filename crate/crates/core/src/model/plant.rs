// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-constructed weights with a known mechanism.
//!
//! Both plants reserve the low token ids:
//!
//! | id | role |
//! |----|------|
//! | 0  | blank (attribution baseline) |
//! | 1  | key |
//! | 2  | signal |
//! | 3  | answer (target) |
//! | 4+ | filler |
//!
//! and use zero-mean paired directions of the residual stream so that layer
//! norm centering leaves them intact:
//!
//! * `P` = (e0 - e1)/sqrt2, added to every position except 0;
//! * `S` = (e2 - e3)/sqrt2, added to position 0 only (attention sink);
//! * `K` = (e4 - e5)/sqrt2, carried by the key token;
//! * `U` = (e6 - e7)/sqrt2, main output direction read by the answer logit;
//! * `G` = (e8 - e9)/sqrt2, the signal token;
//! * `D` = (e10 - e11)/sqrt2, a weak per-filler feature;
//! * `V` = (e12 - e13)/sqrt2, second output direction read by the answer logit.
//!
//! Remaining dimensions carry per-token noise. Token and position vectors
//! have unit norm, except the key token, which is `(blank + K) / 2`: its
//! difference from the blank baseline is orthogonal to the key row, so the
//! only first-order path from a key to the logit is its attention score.
//!
//! **Self-repair plant.** Layer 0, head 0 queries from `P`, scores key tokens
//! at `key_score`, the sink at `sink_score` and everything else at zero. Its
//! value reads `P`, so every non-sink position carries the same value and
//! the head writes `output_scale * U` weighted by the attention mass off the
//! sink. Two key tokens split that mass evenly: removing either one is fully
//! compensated by the other. Head 1 attends uniformly, reads `D` and writes
//! `distractor_scale * V`, giving every filler a small, genuinely linear
//! effect on the logit.
//!
//! **Routed-circuit plant.** Layer 1, head 0 queries from `P`, scores the
//! signal token at `key_score` and the sink at `sink_score`, reads its value
//! from `P` and writes `output_scale * U`. Without a signal the head rests on
//! the sink; with one it moves almost all of its mass onto the signal
//! position. The answer logit therefore depends on the signal token through
//! the attention pattern of exactly one head, in the saturated regime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{init_random, Weights};
use crate::tensor::Tensor;

pub const BLANK_TOKEN: usize = 0;
pub const KEY_TOKEN: usize = 1;
pub const SIGNAL_TOKEN: usize = 2;
pub const ANSWER_TOKEN: usize = 3;
pub const FIRST_FILLER: usize = 4;

const P_DIMS: (usize, usize) = (0, 1);
const S_DIMS: (usize, usize) = (2, 3);
const K_DIMS: (usize, usize) = (4, 5);
const U_DIMS: (usize, usize) = (6, 7);
const G_DIMS: (usize, usize) = (8, 9);
const D_DIMS: (usize, usize) = (10, 11);
const V_DIMS: (usize, usize) = (12, 13);
const NOISE_START: usize = 14;
/// Weight of the blank token and of `K` inside the key token.
const KEY_MIX: f64 = 0.5;
/// Range of filler amplitudes along `D`.
const FILLER_D_RANGE: (f64, f64) = (0.2, 0.4);

/// Smallest `d_model` a plant fits in.
pub const MIN_PLANT_D_MODEL: usize = 20;
/// Smallest vocabulary a plant fits in.
pub const MIN_PLANT_VOCAB: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    None,
    SelfRepair,
    RoutedCircuit,
}

impl std::str::FromStr for PlantKind {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "self-repair" => Ok(Self::SelfRepair),
            "routed-circuit" => Ok(Self::RoutedCircuit),
            other => Err(GimError::invalid(format!("unknown plant `{other}`"))),
        }
    }
}

/// Strengths of the planted mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Pre-softmax score of a key (or signal) token at the planted head.
    pub key_score: f64,
    /// Pre-softmax score of the position-0 sink.
    pub sink_score: f64,
    /// Norm of the planted head's write along `U`.
    pub output_scale: f64,
    /// Weight of `U` and `V` in the answer column of the unembedding.
    pub answer_scale: f64,
    /// Norm of the distractor head's write along `V`; zero disables it.
    pub distractor_scale: f64,
    /// Standard deviation of every unplanted weight.
    pub noise: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            key_score: 10.0,
            sink_score: 6.0,
            output_scale: 2.0,
            answer_scale: 1.0,
            distractor_scale: 2.0,
            noise: 0.02,
        }
    }
}

impl PlantParams {
    fn validate(&self) -> Result<()> {
        let fields = [
            self.key_score,
            self.sink_score,
            self.output_scale,
            self.answer_scale,
            self.distractor_scale,
            self.noise,
        ];
        if fields.iter().any(|v| !v.is_finite()) || self.noise < 0.0 || self.distractor_scale < 0.0
        {
            return Err(GimError::invalid(format!("bad plant parameters {self:?}")));
        }
        Ok(())
    }
}

/// Metadata describing where the mechanism lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantInfo {
    pub format_version: u32,
    pub kind: PlantKind,
    pub layer: usize,
    pub head: usize,
    /// Uniform distractor head, when present.
    pub distractor_head: Option<usize>,
    pub params: PlantParams,
    pub blank_token: usize,
    pub key_token: usize,
    pub signal_token: usize,
    pub answer_token: usize,
    pub first_filler: usize,
}

fn unit_pair(d: usize, dims: (usize, usize)) -> Vec<f64> {
    let mut v = vec![0.0; d];
    let r = std::f64::consts::FRAC_1_SQRT_2;
    v[dims.0] = r;
    v[dims.1] = -r;
    v
}

/// Overwrites column `col` of `m` with `dir * scale`.
fn set_col(m: &mut Tensor, col: usize, dir: &[f64], scale: f64) {
    let cols = m.row_len();
    for (r, v) in dir.iter().enumerate() {
        m.data_mut()[r * cols + col] = v * scale;
    }
}

/// Overwrites row `row` of `m` with `dir * scale`.
fn set_row(m: &mut Tensor, row: usize, dir: &[f64], scale: f64) {
    let cols = m.row_len();
    for (c, v) in dir.iter().enumerate() {
        m.data_mut()[row * cols + c] = v * scale;
    }
}

/// Zeroes the query, key and value columns and output rows of one head.
fn clear_head(block: &mut crate::model::weights::BlockWeights, head: usize, d_head: usize) {
    let d = block.w_q.shape()[0];
    let zeros = vec![0.0; d];
    for j in head * d_head..(head + 1) * d_head {
        set_col(&mut block.w_q, j, &zeros, 0.0);
        set_col(&mut block.w_k, j, &zeros, 0.0);
        set_col(&mut block.w_v, j, &zeros, 0.0);
        set_row(&mut block.w_o, j, &zeros, 0.0);
    }
}

/// Builds weights for `kind`. `PlantKind::None` is plain [`init_random`].
pub fn plant_weights(
    config: &ModelConfig,
    kind: PlantKind,
    params: PlantParams,
    seed: u64,
) -> Result<(Weights, Option<PlantInfo>)> {
    config.validate()?;
    let layer = match kind {
        PlantKind::None => return Ok((init_random(config, seed)?, None)),
        PlantKind::SelfRepair => 0,
        PlantKind::RoutedCircuit => 1,
    };
    params.validate()?;
    let distractor =
        (kind == PlantKind::SelfRepair && params.distractor_scale > 0.0).then_some(1usize);
    check_fits(config, kind, layer, distractor.is_some())?;
    let c = config;
    let d = c.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| GimError::Internal(e.to_string()))?;
    let noise_tensor = |rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * normal.sample(rng)).collect();
        Tensor::from_parts(shape, data)
    };

    let mut w = init_random(c, seed)?;
    for block in &mut w.blocks {
        block.w_q = noise_tensor(&mut rng, vec![d, d], params.noise);
        block.w_k = noise_tensor(&mut rng, vec![d, d], params.noise);
        block.w_v = noise_tensor(&mut rng, vec![d, d], params.noise);
        block.w_o = noise_tensor(&mut rng, vec![d, d], params.noise);
        block.w_gate = noise_tensor(&mut rng, vec![d, c.d_mlp], params.noise);
        block.w_up = noise_tensor(&mut rng, vec![d, c.d_mlp], params.noise);
        block.w_down = noise_tensor(&mut rng, vec![c.d_mlp, d], params.noise);
    }

    // Token embeddings: unit-norm zero-mean noise outside the reserved dims.
    let raw = noise_tensor(&mut rng, vec![c.vocab_size, d - NOISE_START], 1.0);
    let d_hat = unit_pair(d, D_DIMS);
    let mut tok = vec![0.0; c.vocab_size * d];
    for t in 0..c.vocab_size {
        let (done, rest) = tok.split_at_mut(t * d);
        let row = &mut rest[..d];
        match t {
            KEY_TOKEN => {
                let blank = &done[BLANK_TOKEN * d..(BLANK_TOKEN + 1) * d];
                let k_hat = unit_pair(d, K_DIMS);
                for ((dst, b), k) in row.iter_mut().zip(blank).zip(k_hat) {
                    *dst = KEY_MIX * (b + k);
                }
            }
            SIGNAL_TOKEN => row.copy_from_slice(&unit_pair(d, G_DIMS)),
            _ => {
                let src = raw.row(t);
                let mean = src.iter().sum::<f64>() / src.len() as f64;
                let norm = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
                let amp = if t >= FIRST_FILLER && distractor.is_some() {
                    rng.random_range(FILLER_D_RANGE.0..FILLER_D_RANGE.1)
                } else {
                    0.0
                };
                let keep = (1.0 - amp * amp).sqrt();
                for (dst, v) in row[NOISE_START..].iter_mut().zip(src) {
                    *dst = keep * (v - mean) / norm;
                }
                for (dst, v) in row.iter_mut().zip(&d_hat) {
                    *dst += amp * v;
                }
            }
        }
    }
    w.tok_embed = Tensor::from_parts(vec![c.vocab_size, d], tok);

    let mut pos = Vec::with_capacity(c.max_seq_len * d);
    for p in 0..c.max_seq_len {
        pos.extend(unit_pair(d, if p == 0 { S_DIMS } else { P_DIMS }));
    }
    w.pos_embed = Tensor::from_parts(vec![c.max_seq_len, d], pos);

    // Rows entering a block have norm sqrt(2) and zero mean, so layer norm
    // scales every planted direction by sqrt(d / 2).
    let ln_scale = (d as f64 / 2.0).sqrt();
    let p_hat = unit_pair(d, P_DIMS);
    let u_hat = unit_pair(d, U_DIMS);
    let v_hat = unit_pair(d, V_DIMS);
    let s_hat = unit_pair(d, S_DIMS);
    let sqrt_dh = (c.d_head as f64).sqrt();
    let head = 0;
    let col = head * c.d_head;

    let block = &mut w.blocks[layer];
    clear_head(block, head, c.d_head);
    // q = 1 at every position carrying P.
    set_col(&mut block.w_q, col, &p_hat, 1.0 / ln_scale);
    // k chosen so q k / sqrt(d_head) equals the requested scores.
    let mut key_col = vec![0.0; d];
    match kind {
        PlantKind::SelfRepair => {
            // The key row has squared norm 1 + 2 KEY_MIX^2 and K component
            // KEY_MIX, which sets its layer-norm scale.
            let key_ln = KEY_MIX * (d as f64 / (1.0 + 2.0 * KEY_MIX * KEY_MIX)).sqrt();
            let k_hat = unit_pair(d, K_DIMS);
            for r in 0..d {
                key_col[r] =
                    k_hat[r] * params.key_score / key_ln + s_hat[r] * params.sink_score / ln_scale;
            }
            set_col(&mut block.w_v, col, &p_hat, 1.0 / ln_scale);
        }
        _ => {
            let g_hat = unit_pair(d, G_DIMS);
            for r in 0..d {
                key_col[r] =
                    (g_hat[r] * params.key_score + s_hat[r] * params.sink_score) / ln_scale;
            }
            set_col(&mut block.w_v, col, &p_hat, 1.0 / ln_scale);
        }
    }
    set_col(&mut block.w_k, col, &key_col, sqrt_dh);
    set_row(&mut block.w_o, col, &u_hat, params.output_scale);

    if let Some(h) = distractor {
        let dcol = h * c.d_head;
        clear_head(block, h, c.d_head);
        set_col(&mut block.w_v, dcol, &d_hat, 1.0 / ln_scale);
        set_row(&mut block.w_o, dcol, &v_hat, params.distractor_scale);
    }

    let mut unembed = noise_tensor(&mut rng, vec![d, c.vocab_size], params.noise);
    for r in 0..d {
        unembed.data_mut()[r * c.vocab_size + ANSWER_TOKEN] =
            (u_hat[r] + v_hat[r]) * params.answer_scale;
    }
    w.unembed = unembed;
    w.validate()?;

    let info = PlantInfo {
        format_version: 1,
        kind,
        layer,
        head,
        distractor_head: distractor,
        params,
        blank_token: BLANK_TOKEN,
        key_token: KEY_TOKEN,
        signal_token: SIGNAL_TOKEN,
        answer_token: ANSWER_TOKEN,
        first_filler: FIRST_FILLER,
    };
    Ok((w, Some(info)))
}

fn check_fits(c: &ModelConfig, kind: PlantKind, layer: usize, distractor: bool) -> Result<()> {
    if c.d_model < MIN_PLANT_D_MODEL {
        return Err(GimError::invalid(format!(
            "plant {kind:?} needs d_model >= {MIN_PLANT_D_MODEL}, got {}",
            c.d_model
        )));
    }
    if c.vocab_size < MIN_PLANT_VOCAB {
        return Err(GimError::invalid(format!(
            "plant {kind:?} needs vocab_size >= {MIN_PLANT_VOCAB}, got {}",
            c.vocab_size
        )));
    }
    if c.n_layers <= layer {
        return Err(GimError::invalid(format!(
            "plant {kind:?} needs at least {} layers, got {}",
            layer + 1,
            c.n_layers
        )));
    }
    if distractor && c.n_heads < 2 {
        return Err(GimError::invalid(
            "the distractor head needs n_heads >= 2 (or distractor_scale = 0)",
        ));
    }
    if c.max_seq_len < 4 {
        return Err(GimError::invalid("plant needs max_seq_len >= 4"));
    }
    Ok(())
}

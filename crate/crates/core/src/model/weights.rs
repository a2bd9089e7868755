// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GimError, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    /// `[d_model, d_model]`; head `h` owns columns `h*d_head .. (h+1)*d_head`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[d_model, d_model]`; head `h` owns rows `h*d_head .. (h+1)*d_head`.
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// All parameters of the toy decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_final_gain: Tensor,
    pub unembed: Tensor,
}

const BLOCK_TENSORS: [&str; 9] = [
    "ln1.gain",
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln2.gain",
    "mlp.w_gate",
    "mlp.w_up",
    "mlp.w_down",
];

impl BlockWeights {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.ln1_gain,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn shapes(c: &ModelConfig) -> [Vec<usize>; 9] {
        let (d, m) = (c.d_model, c.d_mlp);
        [
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, m],
            vec![d, m],
            vec![m, d],
        ]
    }
}

impl Weights {
    /// Canonical tensor names with their expected shapes, in file order.
    pub fn expected_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let c = config;
        let mut out = vec![
            ("tok_embed".to_owned(), vec![c.vocab_size, c.d_model]),
            ("pos_embed".to_owned(), vec![c.max_seq_len, c.d_model]),
        ];
        for l in 0..c.n_layers {
            for (name, shape) in BLOCK_TENSORS.iter().zip(BlockWeights::shapes(c)) {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("ln_final.gain".to_owned(), vec![c.d_model]));
        out.push(("unembed".to_owned(), vec![c.d_model, c.vocab_size]));
        out
    }

    /// Tensors paired with their canonical names, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_embed".to_owned(), &self.tok_embed),
            ("pos_embed".to_owned(), &self.pos_embed),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(block.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("ln_final.gain".to_owned(), &self.ln_final_gain));
        out.push(("unembed".to_owned(), &self.unembed));
        out
    }

    /// Assembles weights from tensors listed in canonical order, checking
    /// every name and shape against `config`.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::expected_layout(&config);
        if layout.len() != tensors.len() {
            return Err(GimError::format(
                "<manifest>",
                format!("expected {} tensors, found {}", layout.len(), tensors.len()),
            ));
        }
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(&tensors) {
            if want_name != name {
                return Err(GimError::format(
                    name.clone(),
                    format!("expected tensor `{want_name}` at this position"),
                ));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(GimError::format(
                    name.clone(),
                    format!(
                        "shape {:?} does not match config shape {want_shape:?}",
                        t.shape()
                    ),
                ));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked above");
        let tok_embed = next();
        let pos_embed = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                ln1_gain: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_gain: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let ln_final_gain = next();
        let unembed = next();
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            ln_final_gain,
            unembed,
        })
    }

    /// Checks shapes against the config and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Self::from_named(self.config, tensors)?;
        for (name, t) in self.named_tensors() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(GimError::format(name, "non-finite entry"));
            }
        }
        Ok(())
    }
}

/// Deterministic random initialization.
///
/// Matrix and embedding entries are drawn from `N(0, 1/d_model)`; layer-norm
/// gains start at one.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
        .map_err(|e| GimError::Internal(e.to_string()))?;
    let tensors = Weights::expected_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let numel = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; numel]
            } else {
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            (name, Tensor::from_parts(shape, data))
        })
        .collect();
    Weights::from_named(*config, tensors)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use gim_core::attribution::{
    attribute_tokens, gim, gradient_x_input, integrated_gradients, layer_attribution, LayerMethod,
    TokenMethod,
};
use gim_core::data::{generate, Task};
use gim_core::diff::Tape;
use gim_core::model::plant::{plant_weights, PlantKind, PlantParams, KEY_TOKEN};
use gim_core::model::{
    embed, forward_embeddings, init_random, LogitGraph, LogitModel, ModelConfig, Weights,
};
use gim_core::{GradientRuleSet, LayerNormRule, MultiplyRule, Result, SoftmaxRule, Tensor};
use proptest::prelude::*;

/// Logit `sum_{i,d} w[i,d] * x[i,d]` over a fixed embedding table.
struct Linear {
    table: Tensor,
    w: Tensor,
}

impl Linear {
    /// Only `position` carries weight.
    fn designated(vocab: usize, d: usize, seq: usize, position: usize) -> Self {
        let table = Tensor::new(
            vec![vocab, d],
            (0..vocab * d)
                .map(|i| ((i * 7919) % 23) as f64 / 11.0 - 1.0)
                .collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![seq, d],
            (0..seq * d)
                .map(|i| {
                    if i / d == position {
                        1.0 + (i % d) as f64
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
        .unwrap();
        Self { table, w }
    }
}

impl LogitModel for Linear {
    fn vocab_size(&self) -> usize {
        self.table.n_rows()
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        Tensor::from_rows(
            &tokens
                .iter()
                .map(|&t| self.table.row(t).to_vec())
                .collect::<Vec<_>>(),
        )
    }

    fn record(&self, embeddings: &Tensor, _target: usize) -> Result<LogitGraph> {
        let mut tape = Tape::new();
        let input = tape.leaf(embeddings.clone());
        let w = tape.leaf(self.w.clone());
        let p = tape.mul(input, w, false)?;
        let logit = tape.sum(p)?;
        Ok(LogitGraph { tape, input, logit })
    }
}

/// The transformer's target logit read at an earlier position.
struct ReadAt<'a> {
    w: &'a Weights,
    position: usize,
}

impl LogitModel for ReadAt<'_> {
    fn vocab_size(&self) -> usize {
        self.w.config.vocab_size
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        embed(self.w, tokens)
    }

    fn record(&self, embeddings: &Tensor, target: usize) -> Result<LogitGraph> {
        let t = forward_embeddings(self.w, embeddings)?;
        let mut tape = t.tape;
        let logit = tape.select(t.logits, self.position * self.w.config.vocab_size + target)?;
        Ok(LogitGraph {
            tape,
            input: t.input,
            logit,
        })
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        n_layers: 2,
        d_mlp: 16,
        max_seq_len: 16,
        eps_ln: 1e-5,
    }
}

fn argmax_abs(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b })
}

#[test]
fn linear_logit_gxi_is_weight_times_displacement() {
    let m = Linear::designated(8, 4, 6, 2);
    let tokens = [3, 1, 4, 1, 5, 7];
    let r = gradient_x_input(&m, &tokens, 0, 0).unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        let expect: f64 = (0..4)
            .map(|d| m.w.at(i, d) * (m.table.at(t, d) - m.table.at(0, d)))
            .sum();
        assert_eq!(r.scores[i], expect);
    }
}

#[test]
fn designated_token_ranks_first_under_gxi_and_gim() {
    let m = Linear::designated(8, 4, 6, 3);
    let tokens = [3, 1, 4, 6, 5, 7];
    for r in [
        gradient_x_input(&m, &tokens, 0, 0).unwrap(),
        gim(&m, &tokens, 0, 2.0, 0).unwrap(),
    ] {
        assert_eq!(argmax_abs(&r.scores), 3, "{}: {:?}", r.method, r.scores);
        assert!(r
            .scores
            .iter()
            .enumerate()
            .all(|(i, &s)| i == 3 || s == 0.0));
    }
}

#[test]
fn linear_logit_ig_equals_gxi_for_any_step_count() {
    let m = Linear::designated(8, 4, 6, 1);
    let tokens = [2, 7, 4, 1, 5, 3];
    let gxi = gradient_x_input(&m, &tokens, 0, 0).unwrap();
    for steps in [1, 3, 32] {
        let ig = integrated_gradients(&m, &tokens, 0, steps, 0, GradientRuleSet::STANDARD).unwrap();
        assert_eq!(ig.scores, gxi.scores, "steps {steps}");
    }
}

#[test]
fn ig_converges_between_32_and_64_steps() {
    let w = init_random(&ModelConfig::default(), 3).unwrap();
    let tokens: Vec<usize> = (0..16).map(|i| (i * 5 + 2) % 64).collect();
    let total = |steps| -> f64 {
        integrated_gradients(&w, &tokens, 9, steps, 0, GradientRuleSet::STANDARD)
            .unwrap()
            .scores
            .iter()
            .sum()
    };
    let (a, b) = (total(32), total(64));
    assert!((a - b).abs() / b.abs() < 0.01, "32 steps {a}, 64 steps {b}");
}

#[test]
fn default_gim_uses_temperature_two() {
    let r = TokenMethod::Gim {
        temperature: gim_core::DEFAULT_TEMPERATURE,
    }
    .rules()
    .unwrap();
    assert_eq!(r.softmax, SoftmaxRule::temperature_adjusted(2.0).unwrap());
    assert_eq!(r.layernorm, LayerNormRule::Freeze);
    assert_eq!(r.multiply, MultiplyRule::GradNorm);
}

#[test]
fn redundant_keys_get_large_same_sign_gim_scores() {
    let c = ModelConfig::default();
    let (w, _) = plant_weights(&c, PlantKind::SelfRepair, PlantParams::default(), 1).unwrap();
    let data = generate(Task::CopyKey, 10, 2, c.vocab_size, c.max_seq_len).unwrap();
    for rec in &data {
        let keys = rec.ground_truth_positions.as_ref().unwrap();
        let gxi = gradient_x_input(&w, &rec.tokens, rec.target_token, 0).unwrap();
        let g = gim(&w, &rec.tokens, rec.target_token, 2.0, 0).unwrap();
        let (a, b) = (g.scores[keys[0]], g.scores[keys[1]]);
        assert!(a * b > 0.0, "{}: gim key scores {a} {b}", rec.id);
        for &k in keys {
            assert!(
                g.scores[k].abs() > 10.0 * gxi.scores[k].abs(),
                "{} position {k}: gim {} gxi {}",
                rec.id,
                g.scores[k],
                gxi.scores[k]
            );
        }

        // Oracle: the keys matter jointly even though each is redundant alone.
        let logit = |toks: &[usize]| {
            w.logit(&embed(&w, toks).unwrap(), rec.target_token)
                .unwrap()
        };
        let base = logit(&rec.tokens);
        let drop = |ps: &[usize]| {
            let mut t = rec.tokens.clone();
            for &p in ps {
                t[p] = 0;
            }
            base - logit(&t)
        };
        let joint = drop(keys);
        assert!(joint > 0.0);
        assert!(joint > 2.0 * (drop(&keys[..1]) + drop(&keys[1..])).abs());
        assert_eq!(rec.tokens[keys[0]], KEY_TOKEN);
    }
}

#[test]
fn routed_signal_position_tops_the_planted_layer_under_gim() {
    let c = ModelConfig::default();
    let (w, info) = plant_weights(&c, PlantKind::RoutedCircuit, PlantParams::default(), 3).unwrap();
    let layer = info.unwrap().layer;
    let data = generate(Task::PlantedSentiment, 10, 4, c.vocab_size, c.max_seq_len).unwrap();
    for rec in &data {
        let p = rec.ground_truth_positions.as_ref().unwrap()[0];
        let r =
            layer_attribution(&w, &rec.tokens, rec.target_token, &LayerMethod::default()).unwrap();
        assert_eq!(
            argmax_abs(&r.scores[layer]),
            p,
            "{}: {:?}",
            rec.id,
            r.scores[layer]
        );
    }
}

#[test]
fn single_position_layer_scores_are_zero() {
    let w = init_random(&small(), 1).unwrap();
    for m in [
        LayerMethod::Atp,
        LayerMethod::default(),
        LayerMethod::IntegratedGradients { steps: 4 },
    ] {
        let r = layer_attribution(&w, &[5], 2, &m).unwrap();
        assert!(r.scores.iter().flatten().all(|&s| s == 0.0), "{}", m.name());
    }
}

#[test]
fn zero_layer_model_only_engages_the_final_layernorm() {
    let w = init_random(
        &ModelConfig {
            n_layers: 0,
            ..small()
        },
        2,
    )
    .unwrap();
    let tokens = [1, 4, 9, 2];
    let with = |rules| {
        attribute_tokens(&w, &tokens, 3, &TokenMethod::Custom { rules }, 0)
            .unwrap()
            .scores
    };
    let gxi = with(GradientRuleSet::STANDARD);
    let no_blocks = GradientRuleSet {
        layernorm: LayerNormRule::Standard,
        ..GradientRuleSet::gim(2.0).unwrap()
    };
    assert_eq!(with(no_blocks), gxi);
    let freeze_only = GradientRuleSet {
        layernorm: LayerNormRule::Freeze,
        ..GradientRuleSet::STANDARD
    };
    assert_eq!(with(GradientRuleSet::gim(2.0).unwrap()), with(freeze_only));
    let l = layer_attribution(&w, &tokens, 3, &LayerMethod::default()).unwrap();
    assert!(l.scores.is_empty());
}

fn scaled_unembed(w: &Weights, target: usize, lambda: f64) -> Weights {
    let mut out = w.clone();
    let v = out.config.vocab_size;
    let data = w
        .unembed
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if i % v == target { x * lambda } else { x })
        .collect();
    out.unembed = Tensor::new(w.unembed.shape().to_vec(), data).unwrap();
    out
}

fn ranking(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unembed_scaling_scales_scores(
        tokens in proptest::collection::vec(0usize..16, 2..10),
        lambda in 0.25f64..4.0,
        seed in 0u64..100,
    ) {
        let w = init_random(&small(), seed).unwrap();
        let ws = scaled_unembed(&w, 3, lambda);
        for method in [TokenMethod::GradientXInput, TokenMethod::Gim { temperature: 2.0 }] {
            let a = attribute_tokens(&w, &tokens, 3, &method, 0).unwrap().scores;
            let b = attribute_tokens(&ws, &tokens, 3, &method, 0).unwrap().scores;
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x * lambda - y).abs() <= 1e-12 * scale * lambda.max(1.0));
            }
            let gaps_ok = a.windows(2).all(|p| (p[0] - p[1]).abs() > 1e-9 * scale);
            if gaps_ok {
                prop_assert_eq!(ranking(&a), ranking(&b));
            }
        }
    }

    #[test]
    fn positions_after_the_read_position_score_zero(
        tokens in proptest::collection::vec(0usize..16, 3..10),
        seed in 0u64..100,
    ) {
        let w = init_random(&small(), seed).unwrap();
        let position = tokens.len() / 2;
        let m = ReadAt { w: &w, position };
        for method in [TokenMethod::GradientXInput, TokenMethod::Gim { temperature: 2.0 }] {
            let r = attribute_tokens(&m, &tokens, 1, &method, 0).unwrap();
            prop_assert!(r.scores[position + 1..].iter().all(|&s| s == 0.0), "{:?}", r.scores);
            prop_assert!(r.scores[..=position].iter().any(|&s| s != 0.0));
        }
    }

    #[test]
    fn one_step_ig_is_midpoint_gradient_times_input(
        tokens in proptest::collection::vec(0usize..16, 1..8),
        seed in 0u64..100,
        baseline in 0usize..16,
    ) {
        let w = init_random(&small(), seed).unwrap();
        let ig = integrated_gradients(&w, &tokens, 4, 1, baseline, GradientRuleSet::STANDARD).unwrap();
        let x = embed(&w, &tokens).unwrap();
        let xb = embed(&w, &vec![baseline; tokens.len()]).unwrap();
        let mid = xb.zip_map(&x, |b, a| b + 0.5 * (a - b)).unwrap();
        let g = w.record(&mid, 4).unwrap().input_gradient(&GradientRuleSet::STANDARD).unwrap();
        for i in 0..tokens.len() {
            let expect: f64 = (0..x.row_len())
                .map(|d| (x.at(i, d) - xb.at(i, d)) * g.at(i, d))
                .sum();
            prop_assert_eq!(ig.scores[i], expect);
        }
    }

    #[test]
    fn attribution_is_deterministic(tokens in proptest::collection::vec(0usize..16, 1..8), seed in 0u64..50) {
        let w = init_random(&small(), seed).unwrap();
        let method = TokenMethod::IntegratedGradients { steps: 5, rules: GradientRuleSet::gim(2.0).unwrap() };
        let a = attribute_tokens(&w, &tokens, 0, &method, 0).unwrap();
        let b = attribute_tokens(&w, &tokens, 0, &method, 0).unwrap();
        prop_assert_eq!(a, b);
    }
}

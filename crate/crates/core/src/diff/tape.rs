// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recording tape for reverse-mode differentiation.
//!
//! Each operation computes its forward value eagerly and appends a node to
//! the tape. Nodes are stored in execution order, so the tape is always
//! topologically sorted and `backward` simply walks it in reverse. The rule
//! for each interaction site (softmax, layer norm, two-activation products)
//! is looked up in the [`GradientRuleSet`] passed to `backward`, never at
//! record time: one forward pass can be differentiated under any number of
//! rule sets.

use crate::diff::kernels::{
    self, layernorm_backward_row, layernorm_row, matrix_dims, softmax_backward_row, softmax_row,
    transpose_raw,
};
use crate::error::{GimError, Result};
use crate::rules::{GradientRuleSet, MultiplyRule};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape, together with whatever its backward
/// pass needs beyond the input values.
#[derive(Debug, Clone)]
pub enum Op {
    /// Row gather from an embedding table.
    Gather {
        indices: Vec<usize>,
    },
    Add,
    /// Adds a constant tensor (causal mask, ablation mask).
    AddConst {
        constant: Tensor,
    },
    Scale {
        factor: f64,
    },
    /// Matrix product. `interaction` marks products of two activations, the
    /// sites where grad norm applies.
    MatMul {
        interaction: bool,
    },
    Transpose,
    /// Elementwise product.
    Mul {
        interaction: bool,
    },
    /// Multiplies every row of a matrix by a gain vector.
    MulRows,
    Silu,
    /// Row-wise softmax at a forward temperature.
    Softmax {
        temperature: f64,
    },
    /// Row-wise layer normalization; one saved sigma per row.
    LayerNorm {
        eps: f64,
        sigmas: Vec<f64>,
    },
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    /// Picks one entry (flat index) into a `[1]` tensor.
    Select {
        index: usize,
    },
    Sum,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

/// Ordered record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    producer: Vec<Option<usize>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a recorded value; `None` when the value does not reach the seed.
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a recorded value, zeros when it does not reach the seed.
    pub fn get_or_zeros(&self, tape: &Tape, id: TensorId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    /// The node that produced `id`, or `None` for leaves.
    pub fn producer(&self, id: TensorId) -> Option<&Node> {
        self.producer[id.0].map(|i| &self.nodes[i])
    }

    /// Saved per-row sigmas when `id` is a layer-norm output.
    pub fn saved_sigmas(&self, id: TensorId) -> Option<&[f64]> {
        match self.producer(id) {
            Some(Node {
                op: Op::LayerNorm { sigmas, .. },
                ..
            }) => Some(sigmas),
            _ => None,
        }
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.values.push(value);
        self.producer.push(None);
        TensorId(self.values.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor) -> TensorId {
        self.values.push(value);
        let output = TensorId(self.values.len() - 1);
        self.producer.push(Some(self.nodes.len()));
        self.nodes.push(Node { op, inputs, output });
        output
    }

    fn check(&self, id: TensorId) -> Result<&Tensor> {
        self.values
            .get(id.0)
            .ok_or_else(|| GimError::Internal(format!("tensor {} is not on this tape", id.0)))
    }

    pub fn gather(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let t = self.check(table)?;
        let (rows, cols) = matrix_dims(t)?;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(GimError::invalid(format!(
                    "gather index {i} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        if indices.is_empty() {
            return Err(GimError::invalid("gather needs at least one index"));
        }
        let value = Tensor::from_parts(vec![indices.len(), cols], out);
        Ok(self.push(
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![table],
            value,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.check(a)?.zip_map(self.check(b)?, |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn add_const(&mut self, a: TensorId, constant: Tensor) -> Result<TensorId> {
        let value = self.check(a)?.zip_map(&constant, |x, y| x + y)?;
        Ok(self.push(Op::AddConst { constant }, vec![a], value))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let value = self.check(a)?.scale(factor);
        Ok(self.push(Op::Scale { factor }, vec![a], value))
    }

    /// Matrix product of a (non-interaction) activation with a parameter.
    pub fn linear(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        self.matmul_op(x, w, false)
    }

    /// Matrix product of two activations, subject to the multiply rule.
    pub fn interaction_matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_op(a, b, true)
    }

    fn matmul_op(&mut self, a: TensorId, b: TensorId, interaction: bool) -> Result<TensorId> {
        let value = kernels::matmul(self.check(a)?, self.check(b)?)?;
        Ok(self.push(Op::MatMul { interaction }, vec![a, b], value))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.check(a)?;
        let (n, m) = matrix_dims(t)?;
        let value = Tensor::from_parts(vec![m, n], transpose_raw(t.data(), n, m));
        Ok(self.push(Op::Transpose, vec![a], value))
    }

    /// Elementwise product; `interaction` selects whether grad norm applies.
    pub fn mul(&mut self, a: TensorId, b: TensorId, interaction: bool) -> Result<TensorId> {
        let value = self.check(a)?.zip_map(self.check(b)?, |x, y| x * y)?;
        Ok(self.push(Op::Mul { interaction }, vec![a, b], value))
    }

    pub fn mul_rows(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let (t, g) = (self.check(x)?, self.check(gain)?);
        if g.ndim() != 1 || g.numel() != t.row_len() {
            return Err(GimError::invalid(format!(
                "gain of shape {:?} does not match rows of {:?}",
                g.shape(),
                t.shape()
            )));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(g.numel()) {
            for (o, gv) in row.iter_mut().zip(g.data()) {
                *o *= gv;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::MulRows, vec![x, gain], value))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let value = self.check(a)?.map(kernels::silu);
        Ok(self.push(Op::Silu, vec![a], value))
    }

    pub fn softmax(&mut self, scores: TensorId, temperature: f64) -> Result<TensorId> {
        let value = kernels::softmax_forward(self.check(scores)?, temperature)?;
        Ok(self.push(Op::Softmax { temperature }, vec![scores], value))
    }

    pub fn layernorm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let t = self.check(x)?;
        let d = t.row_len();
        if d < 2 {
            return Err(GimError::invalid("layernorm needs rows of length >= 2"));
        }
        let mut out = vec![0.0; t.numel()];
        let sigmas = t
            .rows()
            .zip(out.chunks_exact_mut(d))
            .map(|(row, dst)| layernorm_row(row, eps, dst))
            .collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::LayerNorm { eps, sigmas }, vec![x], value))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let t = self.check(a)?;
        let (n, m) = matrix_dims(t)?;
        if len == 0 || start + len > m {
            return Err(GimError::invalid(format!(
                "column slice {start}..{} out of range for {m} columns",
                start + len
            )));
        }
        let data = t
            .rows()
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::from_parts(vec![n, len], data);
        Ok(self.push(Op::SliceCols { start, len }, vec![a], value))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let tensors = parts
            .iter()
            .map(|&p| self.check(p).and_then(|t| matrix_dims(t).map(|d| (t, d))))
            .collect::<Result<Vec<_>>>()?;
        let n = tensors
            .first()
            .map(|(_, (n, _))| *n)
            .ok_or_else(|| GimError::invalid("concat needs at least one part"))?;
        if tensors.iter().any(|(_, (rows, _))| *rows != n) {
            return Err(GimError::invalid("concat parts have different row counts"));
        }
        let total: usize = tensors.iter().map(|(_, (_, m))| m).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (t, _) in &tensors {
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::from_parts(vec![n, total], data);
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value))
    }

    pub fn select(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let t = self.check(a)?;
        let v = *t.data().get(index).ok_or_else(|| {
            GimError::invalid(format!(
                "select index {index} out of range for {:?}",
                t.shape()
            ))
        })?;
        Ok(self.push(Op::Select { index }, vec![a], Tensor::scalar(v)))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.check(a)?.data().iter().sum();
        Ok(self.push(Op::Sum, vec![a], Tensor::scalar(v)))
    }

    /// Differentiates the scalar `seed` with respect to every recorded value.
    pub fn backward(&self, seed: TensorId, rules: &GradientRuleSet) -> Result<Gradients> {
        let t = self.check(seed)?;
        if t.numel() != 1 {
            return Err(GimError::invalid(format!(
                "backward seed must be a scalar, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_from(seed, Tensor::full(t.shape(), 1.0), rules)
    }

    /// Back-propagates an explicit cotangent `seed_grad` placed on `seed`.
    pub fn backward_from(
        &self,
        seed: TensorId,
        seed_grad: Tensor,
        rules: &GradientRuleSet,
    ) -> Result<Gradients> {
        rules.validate()?;
        self.check(seed)?.expect_same_shape(&seed_grad)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[seed.0] = Some(seed_grad);
        // Nodes after the seed cannot influence it.
        let last = self.producer[seed.0].map_or(0, |i| i + 1);
        for node in self.nodes[..last].iter().rev() {
            let Some(upstream) = grads[node.output.0].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &upstream, rules)?;
            grads[node.output.0] = Some(upstream);
            for (input, g) in node.inputs.iter().zip(contributions) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(
        &self,
        node: &Node,
        upstream: &Tensor,
        rules: &GradientRuleSet,
    ) -> Result<Vec<Tensor>> {
        let input = |k: usize| -> &Tensor { &self.values[node.inputs[k].0] };
        let out = match &node.op {
            Op::Gather { indices } => {
                let table = input(0);
                let cols = table.row_len();
                let mut g = Tensor::zeros(table.shape());
                let data = g.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, src) in data[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(upstream.row(r))
                    {
                        *dst += src;
                    }
                }
                vec![g]
            }
            Op::Add => vec![upstream.clone(), upstream.clone()],
            Op::AddConst { .. } => vec![upstream.clone()],
            Op::Scale { factor } => vec![upstream.scale(*factor)],
            Op::MatMul { interaction } => {
                let rule = if *interaction {
                    rules.multiply
                } else {
                    MultiplyRule::Standard
                };
                let (ga, gb) = kernels::matmul_backward(input(0), input(1), upstream, rule)?;
                vec![ga, gb]
            }
            Op::Transpose => {
                let (n, m) = matrix_dims(upstream)?;
                vec![Tensor::from_parts(
                    vec![m, n],
                    transpose_raw(upstream.data(), n, m),
                )]
            }
            Op::Mul { interaction } => {
                let rule = if *interaction {
                    rules.multiply
                } else {
                    MultiplyRule::Standard
                };
                let (ga, gb) = kernels::mul_backward(input(0), input(1), upstream, rule)?;
                vec![ga, gb]
            }
            Op::MulRows => {
                let (x, gain) = (input(0), input(1));
                let d = gain.numel();
                let mut gx = upstream.data().to_vec();
                let mut gg = vec![0.0; d];
                for (r, row) in gx.chunks_exact_mut(d).enumerate() {
                    let xr = x.row(r);
                    for k in 0..d {
                        gg[k] += row[k] * xr[k];
                        row[k] *= gain.data()[k];
                    }
                }
                vec![
                    Tensor::from_parts(x.shape().to_vec(), gx),
                    Tensor::from_parts(gain.shape().to_vec(), gg),
                ]
            }
            Op::Silu => vec![input(0).zip_map(upstream, |x, g| g * kernels::silu_grad(x))?],
            Op::Softmax { temperature } => {
                let scores = input(0);
                let m = scores.row_len();
                let backward_t = temperature * rules.softmax.temperature_factor();
                let mut s = vec![0.0; m];
                let mut g = vec![0.0; scores.numel()];
                for ((row, up), dst) in scores
                    .rows()
                    .zip(upstream.rows())
                    .zip(g.chunks_exact_mut(m))
                {
                    softmax_row(row, backward_t, &mut s);
                    softmax_backward_row(&s, up, 1.0 / temperature, dst);
                }
                vec![Tensor::from_parts(scores.shape().to_vec(), g)]
            }
            Op::LayerNorm { sigmas, .. } => {
                let x = input(0);
                let d = x.row_len();
                let mut g = vec![0.0; x.numel()];
                for (((row, up), dst), &sigma) in x
                    .rows()
                    .zip(upstream.rows())
                    .zip(g.chunks_exact_mut(d))
                    .zip(sigmas)
                {
                    layernorm_backward_row(row, sigma, up, rules.layernorm, dst);
                }
                vec![Tensor::from_parts(x.shape().to_vec(), g)]
            }
            Op::SliceCols { start, len } => {
                let src = input(0);
                let mut g = Tensor::zeros(src.shape());
                let m = src.row_len();
                let data = g.data_mut();
                for (r, up) in upstream.rows().enumerate() {
                    data[r * m + start..r * m + start + len].copy_from_slice(up);
                }
                vec![g]
            }
            Op::ConcatCols => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let part = input(k);
                    let w = part.row_len();
                    let data = upstream
                        .rows()
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    parts.push(Tensor::from_parts(part.shape().to_vec(), data));
                    offset += w;
                }
                parts
            }
            Op::Select { index } => {
                let mut g = Tensor::zeros(input(0).shape());
                g.data_mut()[*index] = upstream.data()[0];
                vec![g]
            }
            Op::Sum => vec![Tensor::full(input(0).shape(), upstream.data()[0])],
        };
        Ok(out)
    }
}

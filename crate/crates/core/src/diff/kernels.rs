// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward kernels for the operations the toy transformer uses.
//!
//! Row-wise kernels (`softmax`, `layernorm`) operate on the last axis. The
//! slice-level helpers are what the tape calls; the `Tensor`-level functions
//! are the public, validated entry points.

use crate::error::{GimError, Result};
use crate::rules::{LayerNormRule, MultiplyRule, SoftmaxRule};
use crate::tensor::Tensor;

/// Numerically stable softmax of one row at temperature `temperature`.
pub(crate) fn softmax_row(scores: &[f64], temperature: f64, out: &mut [f64]) {
    let inv_t = 1.0 / temperature;
    let max = scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, &a| m.max(a * inv_t));
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(scores) {
        *o = (a * inv_t - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Gradient of `z` w.r.t. the scores of one row, given weights `s` and `g = dz/ds`.
///
/// `grad_j = inv_t * s_j * (g_j (1 - s_j) - sum_{k != j} g_k s_k)`
pub(crate) fn softmax_backward_row(s: &[f64], upstream: &[f64], inv_t: f64, out: &mut [f64]) {
    let weighted: f64 = s.iter().zip(upstream).map(|(s, g)| s * g).sum();
    for ((o, &sj), &gj) in out.iter_mut().zip(s).zip(upstream) {
        let others = weighted - gj * sj;
        *o = inv_t * sj * (gj * (1.0 - sj) - others);
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(GimError::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Softmax along the last axis.
pub fn softmax_forward(scores: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let mut out = vec![0.0; scores.numel()];
    for (row, dst) in scores.rows().zip(out.chunks_exact_mut(scores.row_len())) {
        softmax_row(row, temperature, dst);
    }
    Ok(Tensor::from_parts(scores.shape().to_vec(), out))
}

/// Backward pass of [`softmax_forward`] along the last axis.
///
/// `scores` are the saved forward inputs and `upstream` is `dz/ds`. The
/// temperature-adjusted rule recomputes the weights at
/// `forward_temperature * T` and keeps the `1 / forward_temperature` chain
/// factor, so `T = 1` reproduces the standard rule exactly.
pub fn softmax_backward(
    scores: &Tensor,
    upstream: &Tensor,
    rule: SoftmaxRule,
    forward_temperature: f64,
) -> Result<Tensor> {
    scores.expect_same_shape(upstream)?;
    check_temperature(forward_temperature)?;
    let backward_temperature = forward_temperature * rule.temperature_factor();
    let m = scores.row_len();
    let mut s = vec![0.0; m];
    let mut out = vec![0.0; scores.numel()];
    for ((row, g), dst) in scores
        .rows()
        .zip(upstream.rows())
        .zip(out.chunks_exact_mut(m))
    {
        softmax_row(row, backward_temperature, &mut s);
        softmax_backward_row(&s, g, 1.0 / forward_temperature, dst);
    }
    Ok(Tensor::from_parts(scores.shape().to_vec(), out))
}

/// Normalizes one row in place into `out` and returns its sigma.
pub(crate) fn layernorm_row(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let sigma = (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) / sigma;
    }
    sigma
}

pub(crate) fn layernorm_backward_row(
    x: &[f64],
    sigma: f64,
    upstream: &[f64],
    rule: LayerNormRule,
    out: &mut [f64],
) {
    let d = x.len() as f64;
    let g_mean = upstream.iter().sum::<f64>() / d;
    match rule {
        LayerNormRule::Freeze => {
            for (o, &g) in out.iter_mut().zip(upstream) {
                *o = (g - g_mean) / sigma;
            }
        }
        LayerNormRule::Standard => {
            let mean = x.iter().sum::<f64>() / d;
            let gy_mean = x
                .iter()
                .zip(upstream)
                .map(|(&v, &g)| g * (v - mean) / sigma)
                .sum::<f64>()
                / d;
            for ((o, &v), &g) in out.iter_mut().zip(x).zip(upstream) {
                let y = (v - mean) / sigma;
                *o = (g - g_mean - y * gy_mean) / sigma;
            }
        }
    }
}

/// Layer normalization of a single vector: `y = (x - mean) / sigma` with
/// `sigma = sqrt(var(x) + eps)`.
pub fn layernorm_forward(x: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    if x.ndim() != 1 || x.numel() < 2 {
        return Err(GimError::invalid(format!(
            "layernorm needs a vector of length >= 2, got shape {:?}",
            x.shape()
        )));
    }
    let mut out = vec![0.0; x.numel()];
    let sigma = layernorm_row(x.data(), eps, &mut out);
    Ok((Tensor::from_parts(x.shape().to_vec(), out), sigma))
}

/// Backward pass of [`layernorm_forward`] from its saved input and sigma.
pub fn layernorm_backward(
    x: &Tensor,
    sigma: f64,
    upstream: &Tensor,
    rule: LayerNormRule,
) -> Result<Tensor> {
    x.expect_same_shape(upstream)?;
    if x.ndim() != 1 || x.numel() < 2 {
        return Err(GimError::invalid(
            "layernorm backward needs a vector of length >= 2",
        ));
    }
    let mut out = vec![0.0; x.numel()];
    layernorm_backward_row(x.data(), sigma, upstream.data(), rule, &mut out);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn multiply_factor(rule: MultiplyRule) -> f64 {
    match rule {
        MultiplyRule::Standard => 1.0,
        MultiplyRule::GradNorm => 0.5,
    }
}

pub(crate) fn apply_multiply_rule(grad: &mut Tensor, rule: MultiplyRule) {
    if rule == MultiplyRule::GradNorm {
        for v in grad.data_mut() {
            *v *= 0.5;
        }
    }
}

/// Backward pass of an elementwise product `a * b`.
pub fn mul_backward(
    a: &Tensor,
    b: &Tensor,
    upstream: &Tensor,
    rule: MultiplyRule,
) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(b)?;
    a.expect_same_shape(upstream)?;
    let f = multiply_factor(rule);
    let ga = upstream.zip_map(b, |g, bv| g * bv * f)?;
    let gb = upstream.zip_map(a, |g, av| g * av * f)?;
    Ok((ga, gb))
}

/// Matrix product of `[n, k]` and `[k, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = matrix_dims(a)?;
    let (k2, m) = matrix_dims(b)?;
    if k != k2 {
        return Err(GimError::invalid(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![n, m],
        matmul_raw(a.data(), b.data(), n, k, m),
    ))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub(crate) fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, m] => Ok((n, m)),
        _ => Err(GimError::invalid(format!(
            "expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

/// Backward pass of a contraction `a @ b`: `(upstream @ b^T, a^T @ upstream)`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    upstream: &Tensor,
    rule: MultiplyRule,
) -> Result<(Tensor, Tensor)> {
    let (n, k) = matrix_dims(a)?;
    let (k2, m) = matrix_dims(b)?;
    if k != k2 || upstream.shape() != [n, m] {
        return Err(GimError::invalid(format!(
            "matmul backward shape mismatch: {:?} x {:?} -> {:?}",
            a.shape(),
            b.shape(),
            upstream.shape()
        )));
    }
    let bt = transpose_raw(b.data(), k, m);
    let at = transpose_raw(a.data(), n, k);
    let mut ga = Tensor::from_parts(vec![n, k], matmul_raw(upstream.data(), &bt, n, m, k));
    let mut gb = Tensor::from_parts(vec![k, m], matmul_raw(&at, upstream.data(), k, n, m));
    apply_multiply_rule(&mut ga, rule);
    apply_multiply_rule(&mut gb, rule);
    Ok((ga, gb))
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

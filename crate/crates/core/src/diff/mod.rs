// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor kernels and the rule-selectable reverse-mode tape.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{finite_difference, max_relative_error};
pub use kernels::{
    layernorm_backward, layernorm_forward, matmul, matmul_backward, mul_backward, softmax_backward,
    softmax_forward,
};
pub use tape::{Gradients, Node, Op, Tape, TensorId};

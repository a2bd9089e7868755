// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the attribution engine.
#[derive(Debug, Error)]
pub enum GimError {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A weight file or dataset could not be decoded.
    #[error("format error in `{tensor}`: {message}")]
    Format { tensor: String, message: String },

    /// A dataset line could not be decoded (1-based line number).
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The target logit is too close to zero to normalize a faithfulness curve.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Broken internal bookkeeping (tape references, missing gradients).
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GimError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn format(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Format {
            tensor: tensor.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GimError>;

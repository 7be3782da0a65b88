// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types shared by every module of the crate.

use thiserror::Error;

use crate::archive::ArchiveError;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by kernels, model loading, the forward pass and the
/// analysis passes built on top of it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{what} {value} out of range (limit {limit})")]
    Range {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("trace is missing tap {tap} at layer {layer}")]
    MissingTap { tap: String, layer: usize },

    #[error("{metric} needs at least 2 tokens, got {seq_len}")]
    TooFewTokens {
        metric: &'static str,
        seq_len: usize,
    },

    #[error("{metric}: degenerate all-zero vector at layer {layer}, token {token}")]
    Degenerate {
        metric: &'static str,
        layer: usize,
        token: usize,
    },

    #[error("infeasible synthetic model: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

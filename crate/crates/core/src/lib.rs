// SPDX-License-Identifier: MIT OR Apache-2.0

//! Massive-activation laboratory.
//!
//! An instrumented pre-norm decoder forward pass ([`transformer`]), a
//! single-file tensor archive ([`archive`]), layer-wise diagnostics of how
//! massive activations emerge and persist ([`diagnostics`]), emergence-layer
//! detection plus a calibrated synthetic oracle ([`detector`], [`synth`]),
//! weight-guided masking with baselines ([`wemask`]) and attention-sink
//! measurement ([`sink`]).

pub mod archive;
pub mod detector;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod report;
pub mod sink;
pub mod synth;
pub mod tensor;
pub mod transformer;
pub mod wemask;

pub use error::{Error, Result};

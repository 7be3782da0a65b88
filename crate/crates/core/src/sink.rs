// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-sink scores and their change under masking.
//!
//! A head's sink score is the mean, over query positions `t ≥ 1`, of the
//! probability assigned to the sink column. Query 0 is excluded because it
//! can only attend to itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::l2_norm;
use crate::transformer::{forward, ActivationTrace, CaptureSpec, Intervention, TapPoint, TokenId};
use crate::wemask::{MaskSource, MaskSpec};

/// Per-layer mean score above which a layer counts as having a sink.
pub const SINK_EMERGENCE_THRESHOLD: f64 = 0.5;

/// Sink scores of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub sink_column: usize,
    /// `scores[layer][head]`.
    pub scores: Vec<Vec<f64>>,
    /// Mean over heads, per layer.
    pub layer_mean: Vec<f64>,
    /// Mean score of uniform causal attention over the visible positions.
    pub uniform_baseline: f64,
    pub emergence_threshold: f64,
    /// First layer whose mean exceeds the threshold.
    pub emergence_layer: Option<usize>,
}

/// `Σ_{t≥1} 1/(t+1) / (s−1)`: the score of uniform causal attention for
/// sink column 0.
pub fn uniform_baseline(seq_len: usize) -> f64 {
    if seq_len < 2 {
        return f64::NAN;
    }
    (1..seq_len).map(|t| 1.0 / (t + 1) as f64).sum::<f64>() / (seq_len - 1) as f64
}

/// Scores every layer and head of `trace`, which must hold `attn_probs`
/// at all layers.
pub fn sink_score(trace: &ActivationTrace, sink_column: usize) -> Result<SinkReport> {
    let s = trace.seq_len();
    if s < 2 {
        return Err(Error::TooFewTokens {
            metric: "sink_score",
            seq_len: s,
        });
    }
    if sink_column >= s {
        return Err(Error::Range {
            what: "sink column",
            value: sink_column,
            limit: s,
        });
    }
    let mut scores = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let p = trace.tensor(l, TapPoint::AttnProbs)?;
        let per_head = p
            .data()
            .chunks(s * s)
            .map(|head| {
                (1..s)
                    .map(|t| f64::from(head[t * s + sink_column]))
                    .sum::<f64>()
                    / (s - 1) as f64
            })
            .collect::<Vec<_>>();
        scores.push(per_head);
    }
    let layer_mean: Vec<f64> = scores
        .iter()
        .map(|h| h.iter().sum::<f64>() / h.len() as f64)
        .collect();
    let emergence_layer = layer_mean
        .iter()
        .position(|&m| m > SINK_EMERGENCE_THRESHOLD);
    Ok(SinkReport {
        sink_column,
        scores,
        layer_mean,
        uniform_baseline: uniform_baseline(s),
        emergence_threshold: SINK_EMERGENCE_THRESHOLD,
        emergence_layer,
    })
}

/// Mean over tokens other than `skip` of `‖b − a‖ / ‖a‖` on the last
/// layer's `block_output`.
pub fn non_sink_perturbation(
    base: &ActivationTrace,
    other: &ActivationTrace,
    skip: usize,
) -> Result<f64> {
    let last = base.n_layers().checked_sub(1).ok_or(Error::EmptyInput {
        op: "non_sink_perturbation",
    })?;
    let a = base.tensor(last, TapPoint::BlockOutput)?;
    let b = other.tensor(last, TapPoint::BlockOutput)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "non_sink_perturbation",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 2 {
        return Err(Error::TooFewTokens {
            metric: "non_sink_perturbation",
            seq_len: a.rows(),
        });
    }
    let mut total = 0.0;
    for t in (0..a.rows()).filter(|&t| t != skip) {
        let diff: Vec<f32> = a.row(t).iter().zip(b.row(t)).map(|(x, y)| y - x).collect();
        let n = l2_norm(a.row(t));
        total += if n == 0.0 { 0.0 } else { l2_norm(&diff) / n };
    }
    Ok(total / (a.rows() - 1) as f64)
}

/// One masked run paired with the unmasked baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRun {
    pub spec: MaskSpec,
    pub report: SinkReport,
    /// `masked − unmasked`, per layer (head mean).
    pub layer_delta: Vec<f64>,
    /// `masked − unmasked`, per layer and head.
    pub head_delta: Vec<Vec<f64>>,
    /// Mean relative change of the other tokens' final block outputs.
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkComparison {
    pub baseline: SinkReport,
    pub runs: Vec<SinkRun>,
}

/// Taps needed by [`sink_comparison`].
pub fn sink_capture() -> CaptureSpec {
    CaptureSpec::taps(&[TapPoint::AttnProbs, TapPoint::BlockOutput])
}

/// The intervention a mask runs under: weight-guided specs as `WeMask`,
/// the others as `BaselineMask`.
pub fn mask_intervention(spec: &MaskSpec) -> Intervention {
    match spec.source {
        MaskSource::WeightGuided => Intervention::WeMask(spec.clone()),
        _ => Intervention::BaselineMask(spec.clone()),
    }
}

/// Runs the unmasked pass plus one pass per spec and pairs the scores.
pub fn sink_comparison(
    model: &ModelBundle,
    tokens: &[TokenId],
    specs: &[MaskSpec],
    sink_column: usize,
) -> Result<SinkComparison> {
    let cap = sink_capture();
    let base_trace = forward(model, tokens, &cap, &Intervention::None)?;
    let baseline = sink_score(&base_trace, sink_column)?;
    let mut runs = Vec::with_capacity(specs.len());
    for spec in specs {
        let tr = forward(model, tokens, &cap, &mask_intervention(spec))?;
        let report = sink_score(&tr, sink_column)?;
        let layer_delta = report
            .layer_mean
            .iter()
            .zip(&baseline.layer_mean)
            .map(|(m, b)| m - b)
            .collect();
        let head_delta = report
            .scores
            .iter()
            .zip(&baseline.scores)
            .map(|(m, b)| m.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let perturbation = non_sink_perturbation(&base_trace, &tr, sink_column)?;
        runs.push(SinkRun {
            spec: spec.clone(),
            report,
            layer_delta,
            head_delta,
            perturbation,
        });
    }
    Ok(SinkComparison { baseline, runs })
}

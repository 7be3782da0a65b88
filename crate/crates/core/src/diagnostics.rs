// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise metrics over activation traces.
//!
//! All metrics are computed in `f64` from the `f32` captures. Which
//! RMSNorm is analysed is chosen with [`NormSite`]; the pre-FFN norm is the
//! default. The "massive token" of the difference metrics is configurable
//! and defaults to position 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{dot, l2_norm, topk_abs, Tensor};
use crate::transformer::{ActivationTrace, CaptureSpec, TapPoint};

/// Probability floor applied to both KL arguments before renormalising.
pub const KL_FLOOR: f64 = 1e-12;

/// Which RMSNorm a metric reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSite {
    PreAttention,
    #[default]
    PreFfn,
}

impl NormSite {
    pub fn tap(self) -> TapPoint {
        match self {
            NormSite::PreAttention => TapPoint::AttnNormOut,
            NormSite::PreFfn => TapPoint::FfnNormOut,
        }
    }

    fn weights(self, model: &ModelBundle, layer: usize) -> &Tensor {
        match self {
            NormSite::PreAttention => &model.layers[layer].attn_norm_w,
            NormSite::PreFfn => &model.layers[layer].ffn_norm_w,
        }
    }
}

/// `ceil(0.01 · d_model)`, at least 1.
pub fn default_topk(d_model: usize) -> usize {
    d_model.div_ceil(100).max(1)
}

/// Full-tensor taps needed by [`diagnostics_report`].
pub fn diagnostics_capture() -> CaptureSpec {
    CaptureSpec::taps(&[
        TapPoint::AttnNormOut,
        TapPoint::FfnNormOut,
        TapPoint::FfnGateOut,
        TapPoint::FfnUpOut,
        TapPoint::FfnDownOut,
        TapPoint::BlockOutput,
    ])
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// A `layer × token` matrix of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTokenTable {
    pub metric: String,
    pub tap: TapPoint,
    pub values: Vec<Vec<f64>>,
}

impl LayerTokenTable {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn seq_len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, token: usize) -> f64 {
        self.values[layer][token]
    }

    /// Per layer: `value[token] − mean of the other tokens`.
    pub fn token_gap(&self, token: usize) -> Result<Vec<f64>> {
        token_gap(&self.values, token, "token gap")
    }
}

fn token_gap(values: &[Vec<f64>], token: usize, metric: &'static str) -> Result<Vec<f64>> {
    let seq = values.first().map_or(0, Vec::len);
    if seq < 2 {
        return Err(Error::TooFewTokens {
            metric,
            seq_len: seq,
        });
    }
    if token >= seq {
        return Err(Error::Range {
            what: "massive token",
            value: token,
            limit: seq,
        });
    }
    Ok(values.iter().map(|row| gap_from_rest(row, token)).collect())
}

/// FFN gain per layer and token; `None` where the input norm is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub metric: String,
    pub values: Vec<Vec<Option<f64>>>,
}

impl GainTable {
    pub fn get(&self, layer: usize, token: usize) -> Option<f64> {
        self.values[layer][token]
    }

    /// Largest defined entry as `(layer, token, gain)`.
    pub fn argmax(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, row) in self.values.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.is_none_or(|(_, _, b)| v > b) {
                        best = Some((l, t, v));
                    }
                }
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Norm profiles
// ---------------------------------------------------------------------------

fn profile_from_norms(
    trace: &ActivationTrace,
    tap: TapPoint,
    metric: &str,
) -> Result<LayerTokenTable> {
    if !tap.is_token_indexed() {
        return Err(Error::InvalidArgument(format!(
            "{tap} is not token-indexed"
        )));
    }
    let values = (0..trace.n_layers())
        .map(|l| trace.norms(l, tap).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    Ok(LayerTokenTable {
        metric: metric.to_string(),
        tap,
        values,
    })
}

/// Per-token L2 norm of an RMSNorm output (`ffn_norm_out` by default).
pub fn weight_norm_profile(trace: &ActivationTrace, site: NormSite) -> Result<LayerTokenTable> {
    profile_from_norms(trace, site.tap(), "weight_norm")
}

/// Per-token L2 norm of any token-indexed tap (`block_output` by default).
pub fn norm_profile(trace: &ActivationTrace, tap: TapPoint) -> Result<LayerTokenTable> {
    profile_from_norms(trace, tap, "l2_norm")
}

// ---------------------------------------------------------------------------
// Scaling-factor alignment
// ---------------------------------------------------------------------------

fn check_massive(trace: &ActivationTrace, token: usize, metric: &'static str) -> Result<()> {
    if trace.seq_len() < 2 {
        return Err(Error::TooFewTokens {
            metric,
            seq_len: trace.seq_len(),
        });
    }
    if token >= trace.seq_len() {
        return Err(Error::Range {
            what: "massive token",
            value: token,
            limit: trace.seq_len(),
        });
    }
    Ok(())
}

/// `v[m] − mean_{t≠m} v[t]`, accumulated as a mean of differences so that
/// equal entries give exactly zero.
fn gap_from_rest(v: &[f64], m: usize) -> f64 {
    let s: f64 = v
        .iter()
        .enumerate()
        .filter(|&(t, _)| t != m)
        .map(|(_, x)| v[m] - x)
        .sum();
    s / (v.len() - 1) as f64
}

/// Share of a vector's energy on the index set `k`; zero for a zero vector.
/// The numerator is summed in index order, so the full set gives exactly 1.
pub fn frac_on(h: &[f32], k: &[usize]) -> f64 {
    let total = dot(h, h);
    if total == 0.0 {
        return 0.0;
    }
    let mut idx = k.to_vec();
    idx.sort_unstable();
    idx.iter()
        .map(|&i| f64::from(h[i]) * f64::from(h[i]))
        .sum::<f64>()
        / total
}

/// Per layer, `Frac_m − mean_{t≠m} Frac_t` where `Frac_t` is the share of
/// token `t`'s normalised energy on the top-`k` dims of `|norm weight|`.
pub fn frac_delta(
    trace: &ActivationTrace,
    model: &ModelBundle,
    site: NormSite,
    k: usize,
    massive_token: usize,
) -> Result<Vec<f64>> {
    check_massive(trace, massive_token, "frac_delta")?;
    let d = model.d_model();
    if k == 0 || k > d {
        return Err(Error::Range {
            what: "top-k count",
            value: k,
            limit: d,
        });
    }
    let mut out = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let h = trace.tensor(l, site.tap())?;
        let idx = topk_abs(site.weights(model, l).data(), k)?;
        let fracs: Vec<f64> = h.iter_rows().map(|r| frac_on(r, &idx)).collect();
        out.push(gap_from_rest(&fracs, massive_token));
    }
    Ok(out)
}

/// Normalised squares of `x` with the KL floor applied. `None` for a zero
/// vector.
pub fn energy_distribution(x: &[f32]) -> Option<Vec<f64>> {
    let total = dot(x, x);
    if total == 0.0 {
        return None;
    }
    let floored: Vec<f64> = x
        .iter()
        .map(|&v| (f64::from(v).powi(2) / total).max(KL_FLOOR))
        .collect();
    let z: f64 = floored.iter().sum();
    Some(floored.into_iter().map(|p| p / z).collect())
}

/// `Σ p log(p / q)` for two floored distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Per layer, `KL(p_m‖g) − mean_{t≠m} KL(p_t‖g)` where `p_t` is token
/// `t`'s normalised energy distribution and `g` that of the norm weights.
pub fn kl_delta(
    trace: &ActivationTrace,
    model: &ModelBundle,
    site: NormSite,
    massive_token: usize,
) -> Result<Vec<f64>> {
    check_massive(trace, massive_token, "kl_delta")?;
    let mut out = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let g = energy_distribution(site.weights(model, l).data()).ok_or_else(|| {
            Error::InvalidArgument(format!("kl_delta: all-zero norm weights at layer {l}"))
        })?;
        let h = trace.tensor(l, site.tap())?;
        let mut kls = Vec::with_capacity(h.rows());
        for (t, row) in h.iter_rows().enumerate() {
            let p = energy_distribution(row).ok_or(Error::Degenerate {
                metric: "kl_delta",
                layer: l,
                token: t,
            })?;
            kls.push(kl_divergence(&p, &g));
        }
        out.push(gap_from_rest(&kls, massive_token));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// FFN metrics
// ---------------------------------------------------------------------------

/// `Σ_i (x_i² / Σ_j x_j²)²`; `None` for a zero vector.
///
/// Evaluated as `Σ y⁴ / (Σ y²)²` with `y = x / max|x|`, which is exact for
/// one-hot and uniform-magnitude vectors.
pub fn concentration(x: &[f32]) -> Option<f64> {
    let peak = x.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    if peak == 0.0 {
        return None;
    }
    let (mut s2, mut s4) = (0.0f64, 0.0f64);
    for &v in x {
        let y = f64::from(v) / peak;
        let y2 = y * y;
        s2 += y2;
        s4 += y2 * y2;
    }
    Some(s4 / (s2 * s2))
}

/// Projection concentration of `ffn_gate_out`, `ffn_up_out` or
/// `ffn_down_out` for every layer and token.
pub fn projection_concentration(trace: &ActivationTrace, tap: TapPoint) -> Result<LayerTokenTable> {
    if !matches!(
        tap,
        TapPoint::FfnGateOut | TapPoint::FfnUpOut | TapPoint::FfnDownOut
    ) {
        return Err(Error::InvalidArgument(format!(
            "projection concentration is defined on FFN projections, not {tap}"
        )));
    }
    let mut values = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let h = trace.tensor(l, tap)?;
        let row = h
            .iter_rows()
            .enumerate()
            .map(|(t, r)| {
                concentration(r).ok_or(Error::Degenerate {
                    metric: "projection_concentration",
                    layer: l,
                    token: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(LayerTokenTable {
        metric: "projection_concentration".into(),
        tap,
        values,
    })
}

/// `‖ffn_down_out‖ / ‖ffn_norm_out‖` per layer and token.
pub fn amplification_profile(trace: &ActivationTrace) -> Result<GainTable> {
    let mut values = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let num = trace.norms(l, TapPoint::FfnDownOut)?;
        let den = trace.norms(l, TapPoint::FfnNormOut)?;
        values.push(
            num.iter()
                .zip(den)
                .map(|(&n, &d)| (d != 0.0).then(|| n / d))
                .collect(),
        );
    }
    Ok(GainTable {
        metric: "ffn_amplification".into(),
        values,
    })
}

// ---------------------------------------------------------------------------
// Directional stability
// ---------------------------------------------------------------------------

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn token_states(trace: &ActivationTrace, tap: TapPoint, token: usize) -> Result<Vec<Vec<f32>>> {
    if token >= trace.seq_len() {
        return Err(Error::Range {
            what: "massive token",
            value: token,
            limit: trace.seq_len(),
        });
    }
    (0..trace.n_layers())
        .map(|l| Ok(trace.tensor(l, tap)?.row(token).to_vec()))
        .collect()
}

fn cosine_matrix(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).collect())
        .collect()
}

/// Layer × layer cosine matrix of one token's state within a trace.
pub fn self_similarity(
    trace: &ActivationTrace,
    tap: TapPoint,
    token: usize,
) -> Result<Vec<Vec<f64>>> {
    let s = token_states(trace, tap, token)?;
    Ok(cosine_matrix(&s, &s))
}

/// Cosine matrices between the selected token's states of two traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub a: usize,
    pub b: usize,
    /// `matrix[i][j] = cos(state_a(layer i), state_b(layer j))`.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub tap: TapPoint,
    pub tokens: Vec<usize>,
    /// One self-similarity matrix per trace.
    pub within: Vec<Vec<Vec<f64>>>,
    /// Every unordered trace pair `a < b`.
    pub pairs: Vec<PairSimilarity>,
}

/// Within- and cross-trace similarity of the selected token (one index per
/// trace) across layers.
pub fn cross_similarity(
    traces: &[&ActivationTrace],
    tap: TapPoint,
    tokens: &[usize],
) -> Result<SimilarityReport> {
    if traces.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross_similarity needs at least 2 traces, got {}",
            traces.len()
        )));
    }
    if tokens.len() != traces.len() {
        return Err(Error::InvalidArgument(format!(
            "{} token indices for {} traces",
            tokens.len(),
            traces.len()
        )));
    }
    let d = traces[0].d_model;
    let nl = traces[0].n_layers();
    if let Some(t) = traces.iter().find(|t| t.d_model != d || t.n_layers() != nl) {
        return Err(Error::Shape {
            op: "cross_similarity",
            lhs: vec![nl, d],
            rhs: vec![t.n_layers(), t.d_model],
        });
    }
    let states = traces
        .iter()
        .zip(tokens)
        .map(|(t, &tok)| token_states(t, tap, tok))
        .collect::<Result<Vec<_>>>()?;
    let within = states.iter().map(|s| cosine_matrix(s, s)).collect();
    let mut pairs = Vec::new();
    for a in 0..states.len() {
        for b in a + 1..states.len() {
            pairs.push(PairSimilarity {
                a,
                b,
                matrix: cosine_matrix(&states[a], &states[b]),
            });
        }
    }
    Ok(SimilarityReport {
        tap,
        tokens: tokens.to_vec(),
        within,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

/// Parameters shared by the difference metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub site: NormSite,
    pub topk: usize,
    pub massive_token: usize,
}

impl MetricParams {
    pub fn defaults(d_model: usize) -> Self {
        Self {
            site: NormSite::PreFfn,
            topk: default_topk(d_model),
            massive_token: 0,
        }
    }
}

/// Every layer-wise metric of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub params: MetricParams,
    pub norm_profile: LayerTokenTable,
    pub weight_norm: LayerTokenTable,
    pub frac_delta: Vec<f64>,
    pub kl_delta: Vec<f64>,
    pub concentration_gate: LayerTokenTable,
    pub concentration_up: LayerTokenTable,
    pub concentration_down: LayerTokenTable,
    /// Per-layer concentration gap (massive token minus the rest) for gate,
    /// up and down, in that order.
    pub concentration_gap: [Vec<f64>; 3],
    pub amplification: GainTable,
    /// The amplification factor is this crate's operationalisation: output
    /// norm of the FFN over its input norm.
    pub amplification_definition: String,
}

/// Computes every metric; the trace needs [`diagnostics_capture`] taps.
pub fn diagnostics_report(
    trace: &ActivationTrace,
    model: &ModelBundle,
    params: MetricParams,
) -> Result<DiagnosticsReport> {
    let gate = projection_concentration(trace, TapPoint::FfnGateOut)?;
    let up = projection_concentration(trace, TapPoint::FfnUpOut)?;
    let down = projection_concentration(trace, TapPoint::FfnDownOut)?;
    let m = params.massive_token;
    Ok(DiagnosticsReport {
        params,
        norm_profile: norm_profile(trace, TapPoint::BlockOutput)?,
        weight_norm: weight_norm_profile(trace, params.site)?,
        frac_delta: frac_delta(trace, model, params.site, params.topk, m)?,
        kl_delta: kl_delta(trace, model, params.site, m)?,
        concentration_gap: [gate.token_gap(m)?, up.token_gap(m)?, down.token_gap(m)?],
        concentration_gate: gate,
        concentration_up: up,
        concentration_down: down,
        amplification: amplification_profile(trace)?,
        amplification_definition: "l2(ffn_down_out) / l2(ffn_norm_out)".into(),
    })
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented forward pass of a pre-norm decoder.
//!
//! Each block computes
//!
//! ```text
//! a   = attn_norm(x)            (optionally masked, see MaskInsertion)
//! r   = x + attention(a) · W_O
//! y   = ffn_norm(r)
//! out = r + (silu(y · W_gate) ⊙ (y · W_up)) · W_down
//! ```
//!
//! with causal softmax attention, optional rotary embeddings on Q and K and
//! grouped KV heads. Every intermediate is exposed as a [`TapPoint`]. The
//! trace always keeps per-token L2 norms of the token-indexed taps; full
//! tensors are retained only for the taps and layers named in the
//! [`CaptureSpec`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{dot, l2_norm, matmul, rmsnorm_rows, silu_scalar, softmax_rows, Tensor};
use crate::wemask::{apply_mask_in_place, MaskInsertion, MaskSpec};

/// Token identifier.
pub type TokenId = u32;

// ---------------------------------------------------------------------------
// Taps and capture selection
// ---------------------------------------------------------------------------

/// Instrumented points inside one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    BlockInput,
    /// The attention-branch input as actually consumed (after any mask).
    AttnNormOut,
    /// Scaled pre-softmax logits, `[n_heads × seq × seq]`; causally hidden
    /// entries hold `-inf`.
    AttnScores,
    /// Softmax probabilities, `[n_heads × seq × seq]`.
    AttnProbs,
    AttnOut,
    PostAttnResidual,
    /// The FFN input as actually consumed (raw residual under
    /// `AblateFFNNorm`).
    FfnNormOut,
    /// `y · W_gate`, before the activation.
    FfnGateOut,
    FfnUpOut,
    FfnDownOut,
    BlockOutput,
}

impl TapPoint {
    pub const ALL: [TapPoint; 11] = [
        TapPoint::BlockInput,
        TapPoint::AttnNormOut,
        TapPoint::AttnScores,
        TapPoint::AttnProbs,
        TapPoint::AttnOut,
        TapPoint::PostAttnResidual,
        TapPoint::FfnNormOut,
        TapPoint::FfnGateOut,
        TapPoint::FfnUpOut,
        TapPoint::FfnDownOut,
        TapPoint::BlockOutput,
    ];

    /// `true` for taps shaped `[seq × width]`.
    pub fn is_token_indexed(self) -> bool {
        !matches!(self, TapPoint::AttnScores | TapPoint::AttnProbs)
    }

    pub fn name(self) -> &'static str {
        match self {
            TapPoint::BlockInput => "block_input",
            TapPoint::AttnNormOut => "attn_norm_out",
            TapPoint::AttnScores => "attn_scores",
            TapPoint::AttnProbs => "attn_probs",
            TapPoint::AttnOut => "attn_out",
            TapPoint::PostAttnResidual => "post_attn_residual",
            TapPoint::FfnNormOut => "ffn_norm_out",
            TapPoint::FfnGateOut => "ffn_gate_out",
            TapPoint::FfnUpOut => "ffn_up_out",
            TapPoint::FfnDownOut => "ffn_down_out",
            TapPoint::BlockOutput => "block_output",
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapPoint::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tap `{s}`")))
    }
}

/// Which full tensors to keep. Norm summaries are always kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub taps: BTreeSet<TapPoint>,
    /// `None` keeps the requested taps at every layer.
    pub layers: Option<BTreeSet<usize>>,
}

impl CaptureSpec {
    /// Norm summaries only.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::taps(&TapPoint::ALL)
    }

    pub fn taps(taps: &[TapPoint]) -> Self {
        Self {
            taps: taps.iter().copied().collect(),
            layers: None,
        }
    }

    pub fn at_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.layers = Some(layers.into_iter().collect());
        self
    }

    pub fn wants(&self, layer: usize, tap: TapPoint) -> bool {
        self.taps.contains(&tap) && self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

/// Modification applied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "arg")]
pub enum Intervention {
    #[default]
    None,
    #[serde(rename = "wemask")]
    WeMask(MaskSpec),
    /// FFN output at this layer replaced by zeros.
    #[serde(rename = "ablate_ffn")]
    AblateFFN(usize),
    /// FFN at this layer reads the raw residual instead of its normalised form.
    #[serde(rename = "ablate_ffn_norm")]
    AblateFFNNorm(usize),
    BaselineMask(MaskSpec),
}

impl Intervention {
    fn mask(&self) -> Option<&MaskSpec> {
        match self {
            Intervention::WeMask(s) | Intervention::BaselineMask(s) => Some(s),
            _ => None,
        }
    }

    fn validate(&self, n_layers: usize, d_model: usize, seq_len: usize) -> Result<()> {
        match self {
            Intervention::None => Ok(()),
            Intervention::AblateFFN(l) | Intervention::AblateFFNNorm(l) => {
                if *l >= n_layers {
                    return Err(Error::Range {
                        what: "intervention layer",
                        value: *l,
                        limit: n_layers,
                    });
                }
                Ok(())
            }
            Intervention::WeMask(s) | Intervention::BaselineMask(s) => {
                s.validate_for(n_layers, d_model)?;
                let t = s.token_mode.reference_token();
                if t >= seq_len {
                    return Err(Error::Range {
                        what: "massive token",
                        value: t,
                        limit: seq_len,
                    });
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Captures of one layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCapture {
    /// Per-token L2 norms of every token-indexed tap.
    pub norms: BTreeMap<TapPoint, Vec<f64>>,
    /// Full tensors for the requested taps.
    pub tensors: BTreeMap<TapPoint, Tensor>,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub token_ids: Vec<TokenId>,
    pub capture: CaptureSpec,
    pub intervention: Intervention,
    pub n_heads: usize,
    pub d_model: usize,
    pub layers: Vec<LayerCapture>,
}

impl ActivationTrace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn missing(tap: TapPoint, layer: usize) -> Error {
        Error::MissingTap {
            tap: tap.name().to_string(),
            layer,
        }
    }

    /// Full captured tensor of `tap` at `layer`.
    pub fn tensor(&self, layer: usize, tap: TapPoint) -> Result<&Tensor> {
        self.layers
            .get(layer)
            .and_then(|c| c.tensors.get(&tap))
            .ok_or_else(|| Self::missing(tap, layer))
    }

    pub fn has_tensor(&self, layer: usize, tap: TapPoint) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|c| c.tensors.contains_key(&tap))
    }

    /// Per-token L2 norms of a token-indexed tap at `layer`.
    pub fn norms(&self, layer: usize, tap: TapPoint) -> Result<&[f64]> {
        self.layers
            .get(layer)
            .and_then(|c| c.norms.get(&tap))
            .map(Vec::as_slice)
            .ok_or_else(|| Self::missing(tap, layer))
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled attention logits `q·kᵀ / sqrt(d_head)` for one head, with `-inf`
/// above the diagonal when `causal`.
pub fn attention_scores(q: &Tensor, k: &Tensor, causal: bool) -> Result<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (sq, sk) = (q.rows(), k.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut data = Vec::with_capacity(sq * sk);
    for i in 0..sq {
        for j in 0..sk {
            data.push(if causal && j > i {
                f32::NEG_INFINITY
            } else {
                (dot(q.row(i), k.row(j)) * scale) as f32
            });
        }
    }
    Tensor::new(vec![sq, sk], data)
}

/// Single-head attention: `probs = softmax(q·kᵀ/sqrt(d) + mask)`,
/// `out = probs · v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<(Tensor, Tensor)> {
    let (out, probs, _) = attention_full(q, k, v, causal)?;
    Ok((out, probs))
}

fn attention_full(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    if v.shape().len() != 2 || v.rows() != k.rows() {
        return Err(Error::Shape {
            op: "attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let scores = attention_scores(q, k, causal)?;
    let probs = softmax_rows(&scores)?;
    let out = matmul(&probs, v)?;
    Ok((out, probs, scores))
}

/// Rotates each head's `(i, i + d_head/2)` pairs by `pos · theta^(-2i/d_head)`.
fn apply_rope(x: &mut Tensor, n_heads: usize, d_head: usize, theta: f64) {
    let half = d_head / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for h in 0..n_heads {
            let head = &mut row[h * d_head..(h + 1) * d_head];
            for (i, &f) in freqs.iter().enumerate() {
                let (sin, cos) = (pos as f64 * f).sin_cos();
                let a = f64::from(head[i]);
                let b = f64::from(head[i + half]);
                head[i] = (a * cos - b * sin) as f32;
                head[i + half] = (a * sin + b * cos) as f32;
            }
        }
    }
}

fn head_slice(x: &Tensor, head: usize, d_head: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.rows() * d_head);
    for row in x.iter_rows() {
        data.extend_from_slice(&row[head * d_head..(head + 1) * d_head]);
    }
    Tensor::new(vec![x.rows(), d_head], data).expect("head slice shape")
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    x.iter_rows().map(l2_norm).collect()
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Runs `tokens` through `model` under `iv`, recording the requested taps.
pub fn forward(
    model: &ModelBundle,
    tokens: &[TokenId],
    capture: &CaptureSpec,
    iv: &Intervention,
) -> Result<ActivationTrace> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::EmptyInput { op: "forward" });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Range {
            what: "token id",
            value: bad as usize,
            limit: cfg.vocab_size,
        });
    }
    let seq = tokens.len();
    let d = cfg.d_model;
    iv.validate(cfg.n_layers, d, seq)?;

    let mut emb = Vec::with_capacity(seq * d);
    for &t in tokens {
        emb.extend_from_slice(model.embedding.row(t as usize));
    }
    let mut x = Tensor::new(vec![seq, d], emb)?;
    let group = cfg.n_heads / cfg.n_kv_heads;
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (l, w) in model.layers.iter().enumerate() {
        let mut rec = Recorder::new(l, capture);
        rec.put(TapPoint::BlockInput, &x);

        // attention branch
        let mask = iv.mask().filter(|s| s.dims(l).is_some());
        let massive = mask.map_or(0, |s| s.token_mode.reference_token());
        let a = match mask {
            Some(spec) if spec.insertion == MaskInsertion::BeforeNorm => {
                let mut pre = x.clone();
                apply_mask_in_place(&mut pre, spec, l, massive)?;
                rmsnorm_rows(&pre, &w.attn_norm_w, cfg.norm_eps)?
            }
            Some(spec) => {
                let mut a = rmsnorm_rows(&x, &w.attn_norm_w, cfg.norm_eps)?;
                apply_mask_in_place(&mut a, spec, l, massive)?;
                a
            }
            None => rmsnorm_rows(&x, &w.attn_norm_w, cfg.norm_eps)?,
        };
        rec.put(TapPoint::AttnNormOut, &a);

        let mut q = matmul(&a, &w.w_q)?;
        let mut k = matmul(&a, &w.w_k)?;
        let v = matmul(&a, &w.w_v)?;
        if cfg.rope_enabled {
            apply_rope(&mut q, cfg.n_heads, cfg.d_head, cfg.rope_theta);
            apply_rope(&mut k, cfg.n_kv_heads, cfg.d_head, cfg.rope_theta);
        }
        let want_scores = capture.wants(l, TapPoint::AttnScores);
        let want_probs = capture.wants(l, TapPoint::AttnProbs);
        let mut scores_all = Vec::new();
        let mut probs_all = Vec::new();
        let mut concat = vec![0.0f32; seq * cfg.n_heads * cfg.d_head];
        let width = cfg.n_heads * cfg.d_head;
        for h in 0..cfg.n_heads {
            let kv = h / group;
            let (out, probs, scores) = attention_full(
                &head_slice(&q, h, cfg.d_head),
                &head_slice(&k, kv, cfg.d_head),
                &head_slice(&v, kv, cfg.d_head),
                true,
            )?;
            for (t, row) in out.iter_rows().enumerate() {
                concat[t * width + h * cfg.d_head..t * width + (h + 1) * cfg.d_head]
                    .copy_from_slice(row);
            }
            if want_scores {
                scores_all.extend_from_slice(scores.data());
            }
            if want_probs {
                probs_all.extend_from_slice(probs.data());
            }
        }
        if want_scores {
            rec.put_full(
                TapPoint::AttnScores,
                Tensor::new(vec![cfg.n_heads, seq, seq], scores_all)?,
            );
        }
        if want_probs {
            rec.put_full(
                TapPoint::AttnProbs,
                Tensor::new(vec![cfg.n_heads, seq, seq], probs_all)?,
            );
        }
        let attn_out = matmul(&Tensor::new(vec![seq, width], concat)?, &w.w_o)?;
        rec.put(TapPoint::AttnOut, &attn_out);
        let resid = add(&x, &attn_out);
        rec.put(TapPoint::PostAttnResidual, &resid);

        // FFN branch
        let y = if *iv == Intervention::AblateFFNNorm(l) {
            resid.clone()
        } else {
            rmsnorm_rows(&resid, &w.ffn_norm_w, cfg.norm_eps)?
        };
        rec.put(TapPoint::FfnNormOut, &y);
        let out = if *iv == Intervention::AblateFFN(l) {
            rec.put(TapPoint::FfnGateOut, &Tensor::zeros(&[seq, cfg.d_ff]));
            rec.put(TapPoint::FfnUpOut, &Tensor::zeros(&[seq, cfg.d_ff]));
            rec.put(TapPoint::FfnDownOut, &Tensor::zeros(&[seq, d]));
            resid
        } else {
            let gate = matmul(&y, &w.w_gate)?;
            let up = matmul(&y, &w.w_up)?;
            rec.put(TapPoint::FfnGateOut, &gate);
            rec.put(TapPoint::FfnUpOut, &up);
            let hidden: Vec<f32> = gate
                .data()
                .iter()
                .zip(up.data())
                .map(|(&g, &u)| silu_scalar(g) * u)
                .collect();
            let down = matmul(&Tensor::new(vec![seq, cfg.d_ff], hidden)?, &w.w_down)?;
            rec.put(TapPoint::FfnDownOut, &down);
            add(&resid, &down)
        };
        rec.put(TapPoint::BlockOutput, &out);
        layers.push(rec.finish());
        x = out;
    }

    Ok(ActivationTrace {
        token_ids: tokens.to_vec(),
        capture: capture.clone(),
        intervention: iv.clone(),
        n_heads: cfg.n_heads,
        d_model: d,
        layers,
    })
}

struct Recorder<'a> {
    layer: usize,
    capture: &'a CaptureSpec,
    out: LayerCapture,
}

impl<'a> Recorder<'a> {
    fn new(layer: usize, capture: &'a CaptureSpec) -> Self {
        Self {
            layer,
            capture,
            out: LayerCapture::default(),
        }
    }

    fn put(&mut self, tap: TapPoint, t: &Tensor) {
        self.out.norms.insert(tap, row_norms(t));
        if self.capture.wants(self.layer, tap) {
            self.out.tensors.insert(tap, t.clone());
        }
    }

    fn put_full(&mut self, tap: TapPoint, t: Tensor) {
        self.out.tensors.insert(tap, t);
    }

    fn finish(self) -> LayerCapture {
        self.out
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight-guided dimension masks and their baselines.
//!
//! A [`MaskSpec`] lists, for every covered layer, the hidden dimensions to
//! zero in the attention-branch input of the designated token(s). The
//! weight-guided rule picks the `k = floor(rate · d_model)` dimensions with
//! the largest `|attn_norm_w|`; the baselines pick them uniformly at random
//! or by the magnitude of the massive token's attention input in a
//! reference trace. All three share [`apply_mask`], so comparisons only
//! differ in the selection rule.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{topk_abs, Tensor};
use crate::transformer::{ActivationTrace, TapPoint};

/// Which layers a mask covers, relative to the emergence layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// The emergence layer and every layer after it.
    AllAfterMe,
    /// Only the emergence layer.
    MeOnly,
}

/// Which token rows a mask touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    MassiveToken(usize),
    AllTokens,
}

impl TokenMode {
    /// The row used as "the massive token" (row 0 under `AllTokens`).
    pub fn reference_token(&self) -> usize {
        match *self {
            TokenMode::MassiveToken(t) => t,
            TokenMode::AllTokens => 0,
        }
    }
}

/// Where the mask sits relative to the pre-attention RMSNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskInsertion {
    /// Zero dimensions of the normalised attention input (default).
    #[default]
    AfterNorm,
    /// Zero dimensions of the residual copy that feeds the norm.
    BeforeNorm,
}

/// How the dimension sets were chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MaskSource {
    WeightGuided,
    Random { seed: u64 },
    Magnitude,
}

/// Per-layer selected dimensions plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Covered layer → ascending dimension indices.
    pub layers: BTreeMap<usize, Vec<usize>>,
    pub mask_rate: f64,
    pub policy: MaskPolicy,
    pub token_mode: TokenMode,
    pub source: MaskSource,
    #[serde(default)]
    pub insertion: MaskInsertion,
    pub me_layer: usize,
    pub d_model: usize,
}

impl MaskSpec {
    pub fn dims(&self, layer: usize) -> Option<&[usize]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn with_insertion(mut self, insertion: MaskInsertion) -> Self {
        self.insertion = insertion;
        self
    }

    /// `k` shared by every covered layer.
    pub fn k(&self) -> usize {
        mask_count(self.mask_rate, self.d_model)
    }

    /// Checks the spec against a model's shape.
    pub fn validate_for(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if self.d_model != d_model {
            return Err(Error::InvalidArgument(format!(
                "mask built for d_model {} applied to d_model {d_model}",
                self.d_model
            )));
        }
        for (&layer, dims) in &self.layers {
            if layer >= n_layers {
                return Err(Error::Range {
                    what: "mask layer",
                    value: layer,
                    limit: n_layers,
                });
            }
            if let Some(&d) = dims.iter().find(|&&d| d >= d_model) {
                return Err(Error::Range {
                    what: "mask dimension",
                    value: d,
                    limit: d_model,
                });
            }
        }
        Ok(())
    }
}

/// `floor(rate · d)`; the tiny offset keeps products such as `0.7 × 10`
/// from rounding down to 6.
pub fn mask_count(rate: f64, d_model: usize) -> usize {
    ((rate * d_model as f64) + 1e-9).floor() as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {rate} outside [0, 1]"
        )));
    }
    Ok(())
}

fn covered_layers(me_layer: usize, n_layers: usize, policy: MaskPolicy) -> Result<Vec<usize>> {
    if me_layer >= n_layers {
        return Err(Error::Range {
            what: "emergence layer",
            value: me_layer,
            limit: n_layers,
        });
    }
    Ok(match policy {
        MaskPolicy::AllAfterMe => (me_layer..n_layers).collect(),
        MaskPolicy::MeOnly => vec![me_layer],
    })
}

/// Weight-guided mask: per covered layer, the top-`k` dimensions of
/// `|attn_norm_w|`.
pub fn build_mask(
    model: &ModelBundle,
    me_layer: usize,
    rate: f64,
    policy: MaskPolicy,
    token_mode: TokenMode,
) -> Result<MaskSpec> {
    check_rate(rate)?;
    let d = model.d_model();
    let k = mask_count(rate, d);
    let mut layers = BTreeMap::new();
    for l in covered_layers(me_layer, model.n_layers(), policy)? {
        layers.insert(l, topk_abs(model.layers[l].attn_norm_w.data(), k)?);
    }
    Ok(MaskSpec {
        layers,
        mask_rate: rate,
        policy,
        token_mode,
        source: MaskSource::WeightGuided,
        insertion: MaskInsertion::AfterNorm,
        me_layer,
        d_model: d,
    })
}

/// Selection rule of a baseline mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Random { seed: u64 },
    Magnitude,
}

/// Random or magnitude baseline. The magnitude variant ranks the reference
/// token's row of `attn_norm_out` in `reference`, which must be an
/// unmasked trace with that tap captured at every covered layer.
pub fn baseline_mask(
    model: &ModelBundle,
    me_layer: usize,
    rate: f64,
    policy: MaskPolicy,
    token_mode: TokenMode,
    kind: BaselineKind,
    reference: Option<&ActivationTrace>,
) -> Result<MaskSpec> {
    check_rate(rate)?;
    let d = model.d_model();
    let k = mask_count(rate, d);
    let covered = covered_layers(me_layer, model.n_layers(), policy)?;
    let mut layers = BTreeMap::new();
    let source = match kind {
        BaselineKind::Random { seed } => {
            for l in covered {
                let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, l));
                let mut dims = rand::seq::index::sample(&mut rng, d, k).into_vec();
                dims.sort_unstable();
                layers.insert(l, dims);
            }
            MaskSource::Random { seed }
        }
        BaselineKind::Magnitude => {
            let trace = reference.ok_or_else(|| {
                Error::InvalidArgument("magnitude mask needs a reference trace".into())
            })?;
            let token = token_mode.reference_token();
            if token >= trace.seq_len() {
                return Err(Error::Range {
                    what: "massive token",
                    value: token,
                    limit: trace.seq_len(),
                });
            }
            for l in covered {
                let h = trace.tensor(l, TapPoint::AttnNormOut)?;
                layers.insert(l, topk_abs(h.row(token), k)?);
            }
            MaskSource::Magnitude
        }
    };
    Ok(MaskSpec {
        layers,
        mask_rate: rate,
        policy,
        token_mode,
        source,
        insertion: MaskInsertion::AfterNorm,
        me_layer,
        d_model: d,
    })
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Zeros the selected dimensions of `spec` at `layer` in the designated
/// row(s) of `hidden: [seq × d]`. Uncovered layers return the input as is.
pub fn apply_mask(
    hidden: &Tensor,
    spec: &MaskSpec,
    layer: usize,
    massive_token: usize,
) -> Result<Tensor> {
    let mut out = hidden.clone();
    apply_mask_in_place(&mut out, spec, layer, massive_token)?;
    Ok(out)
}

pub(crate) fn apply_mask_in_place(
    hidden: &mut Tensor,
    spec: &MaskSpec,
    layer: usize,
    massive_token: usize,
) -> Result<()> {
    let seq = hidden.rows();
    if massive_token >= seq {
        return Err(Error::Range {
            what: "massive token",
            value: massive_token,
            limit: seq,
        });
    }
    let Some(dims) = spec.dims(layer) else {
        return Ok(());
    };
    if let Some(&bad) = dims.iter().find(|&&d| d >= hidden.cols()) {
        return Err(Error::Range {
            what: "mask dimension",
            value: bad,
            limit: hidden.cols(),
        });
    }
    let rows: Vec<usize> = match spec.token_mode {
        TokenMode::MassiveToken(_) => vec![massive_token],
        TokenMode::AllTokens => (0..seq).collect(),
    };
    for r in rows {
        let row = hidden.row_mut(r);
        for &d in dims {
            row[d] = 0.0;
        }
    }
    Ok(())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser bindings for the static demo page in `www/`.
//!
//! Every export builds a synthetic oracle from its arguments, runs the
//! requested analysis and returns a JSON string. The `*_json` functions are
//! the same operations without the JavaScript boundary.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use melab::detector::{
    detect_me_layer, max_jump_per_layer, MEDetection, DEFAULT_EXCLUDE_TAIL, DEFAULT_THRESHOLD,
};
use melab::diagnostics::norm_profile;
use melab::model::ModelBundle;
use melab::sink::{mask_intervention, sink_comparison};
use melab::synth::{synth_config, synth_model, synth_tokens};
use melab::transformer::{forward, CaptureSpec, Intervention, TapPoint, TokenId};
use melab::wemask::{baseline_mask, build_mask, BaselineKind, MaskPolicy, MaskSpec, TokenMode};

const INPUT_LEN: usize = 16;

/// Oracle settings shared by every operation.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub n_layers: usize,
    pub target: usize,
    pub jump: f64,
    pub sink_strength: f64,
    pub seed: u64,
    pub input_seed: u64,
}

impl Oracle {
    fn build(&self) -> Result<(ModelBundle, Vec<TokenId>), String> {
        let cfg = synth_config(self.n_layers);
        let m = synth_model(&cfg, self.target, self.jump, self.sink_strength, self.seed)
            .map_err(|e| e.to_string())?;
        let t =
            synth_tokens(cfg.vocab_size, INPUT_LEN, self.input_seed).map_err(|e| e.to_string())?;
        Ok((m, t))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn mask_for(
    m: &ModelBundle,
    me: usize,
    rate: f64,
    kind: &str,
    seed: u64,
) -> Result<MaskSpec, String> {
    let (p, t) = (MaskPolicy::AllAfterMe, TokenMode::MassiveToken(0));
    let spec = match kind {
        "weight" => build_mask(m, me, rate, p, t),
        "random" => baseline_mask(m, me, rate, p, t, BaselineKind::Random { seed }, None),
        "magnitude" => {
            return Err("the demo offers weight and random masks only".into());
        }
        other => return Err(format!("unknown mask kind `{other}`")),
    };
    spec.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Profile {
    tokens: Vec<TokenId>,
    /// `norms[layer][token]` of `block_output`.
    norms: Vec<Vec<f64>>,
    /// Largest layer-to-layer ratio per layer `≥ 1`.
    max_jump: Vec<Option<f64>>,
    detection: Option<MEDetection>,
    threshold: f64,
}

/// Block-output norms of every token and the detector's verdict.
pub fn profile_json(o: Oracle) -> Result<String, String> {
    let (m, toks) = o.build()?;
    let tr =
        forward(&m, &toks, &CaptureSpec::none(), &Intervention::None).map_err(|e| e.to_string())?;
    let p = norm_profile(&tr, TapPoint::BlockOutput).map_err(|e| e.to_string())?;
    let detection =
        detect_me_layer(&p, DEFAULT_THRESHOLD, DEFAULT_EXCLUDE_TAIL).map_err(|e| e.to_string())?;
    to_json(&Profile {
        tokens: toks,
        max_jump: max_jump_per_layer(&p)
            .into_iter()
            .map(|j| j.map(|(_, r)| r))
            .collect(),
        norms: p.values,
        detection,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[derive(Serialize)]
struct Sweep {
    rates: Vec<f64>,
    unmasked: Vec<f64>,
    /// `masked[rate][layer]` head-mean sink scores.
    masked: Vec<Vec<f64>>,
    perturbation: Vec<f64>,
    uniform_baseline: f64,
}

/// Sink scores per layer for each mask rate, masking from the engineered layer on.
pub fn sweep_json(o: Oracle, rates: &[f64], kind: &str) -> Result<String, String> {
    let (m, toks) = o.build()?;
    let specs = rates
        .iter()
        .map(|&r| mask_for(&m, o.target, r, kind, o.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let c = sink_comparison(&m, &toks, &specs, 0).map_err(|e| e.to_string())?;
    to_json(&Sweep {
        rates: rates.to_vec(),
        unmasked: c.baseline.layer_mean,
        masked: c.runs.iter().map(|r| r.report.layer_mean.clone()).collect(),
        perturbation: c.runs.iter().map(|r| r.perturbation).collect(),
        uniform_baseline: c.baseline.uniform_baseline,
    })
}

#[derive(Serialize)]
struct AttentionMap {
    layer: usize,
    head: usize,
    rate: f64,
    /// `probs[query][key]`.
    probs: Vec<Vec<f32>>,
}

/// Attention probabilities of one head, optionally under a weight-guided mask.
pub fn attention_json(o: Oracle, layer: usize, head: usize, rate: f64) -> Result<String, String> {
    let (m, toks) = o.build()?;
    if layer >= m.n_layers() || head >= m.config.n_heads {
        return Err(format!("layer {layer} / head {head} out of range"));
    }
    let iv = if rate > 0.0 {
        mask_intervention(&mask_for(&m, o.target, rate, "weight", o.seed)?)
    } else {
        Intervention::None
    };
    let cap = CaptureSpec::taps(&[TapPoint::AttnProbs]).at_layers([layer]);
    let tr = forward(&m, &toks, &cap, &iv).map_err(|e| e.to_string())?;
    let p = tr
        .tensor(layer, TapPoint::AttnProbs)
        .map_err(|e| e.to_string())?;
    let s = toks.len();
    let block = &p.data()[head * s * s..(head + 1) * s * s];
    to_json(&AttentionMap {
        layer,
        head,
        rate,
        probs: block.chunks(s).map(<[f32]>::to_vec).collect(),
    })
}

// ---------------------------------------------------------------------------
// JavaScript boundary
// ---------------------------------------------------------------------------

fn oracle(
    n_layers: usize,
    target: usize,
    jump: f64,
    sink_strength: f64,
    seed: u32,
    input_seed: u32,
) -> Oracle {
    Oracle {
        n_layers,
        target,
        jump,
        sink_strength,
        seed: u64::from(seed),
        input_seed: u64::from(input_seed),
    }
}

#[wasm_bindgen]
pub fn profile(
    n_layers: usize,
    target: usize,
    jump: f64,
    sink_strength: f64,
    seed: u32,
    input_seed: u32,
) -> Result<String, JsError> {
    profile_json(oracle(
        n_layers,
        target,
        jump,
        sink_strength,
        seed,
        input_seed,
    ))
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mask_sweep(
    n_layers: usize,
    target: usize,
    sink_strength: f64,
    seed: u32,
    input_seed: u32,
    rates: Vec<f64>,
    kind: &str,
) -> Result<String, JsError> {
    let o = oracle(
        n_layers,
        target,
        melab::synth::DEFAULT_JUMP,
        sink_strength,
        seed,
        input_seed,
    );
    sweep_json(o, &rates, kind).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn attention(
    n_layers: usize,
    target: usize,
    sink_strength: f64,
    seed: u32,
    input_seed: u32,
    layer: usize,
    head: usize,
    rate: f64,
) -> Result<String, JsError> {
    let o = oracle(
        n_layers,
        target,
        melab::synth::DEFAULT_JUMP,
        sink_strength,
        seed,
        input_seed,
    );
    attention_json(o, layer, head, rate).map_err(|e| JsError::new(&e))
}

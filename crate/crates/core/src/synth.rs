// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic oracle models with an engineered emergence layer.
//!
//! The hidden dimensions are split, under a seeded permutation, into
//!
//! * `gate_dim`, `up_dim`: carry the trigger token's signature (6 and 3);
//!   every other token holds zeros there,
//! * `bias_dim`: a constant 1.5 on every non-trigger token,
//! * `key_dims`: about 72% of the rest,
//! * `value_dims`: the remainder, including `massive_dim`.
//!
//! Ordinary layers read only the key, value and bias dimensions and write
//! only key and value dimensions, so the signature and the bias survive
//! unchanged down the residual stream. At the target layer the pre-FFN
//! RMSNorm weight on `gate_dim` is 20 (the largest), and one FFN unit gates
//! on `gate_dim`, reads its value from `up_dim` and writes a fixed unit
//! direction `u` (40% of its energy on `massive_dim`, 35% spread evenly
//! over the key dimensions). The write scale and the `up_dim` norm weight
//! are solved in closed form from the trigger token's trajectory, which by
//! causality does not depend on the rest of the input, so that the jump
//! equals the requested factor and the same jump with the FFN norm removed
//! is `factor / 2.5`.
//!
//! With `sink_strength > 0`, every layer after the target gives the key
//! dimensions graded large pre-attention norm weights, removes them from
//! `W_V`, and routes them into one key coordinate per KV head; queries read
//! that coordinate from `bias_dim`. The key gain is set per layer so the
//! trigger column's mean logit equals `sink_strength`. Masking top-weight
//! dimensions thus removes sink logit in proportion to the number of key
//! dimensions masked while leaving the trigger's value vector intact.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelBundle, ModelConfig};
use crate::tensor::{dot, l2_norm, silu_scalar, Tensor};
use crate::transformer::{forward, CaptureSpec, Intervention, TapPoint, TokenId};

/// Token id whose presence at position 0 triggers the massive activation.
pub const TRIGGER: TokenId = 0;

/// Jump reduction targeted for the FFN-norm ablation.
pub const NORM_ABLATION_FACTOR: f64 = 2.5;

pub const DEFAULT_JUMP: f64 = 300.0;
pub const DEFAULT_SINK_STRENGTH: f64 = 5.0;

const TRIGGER_GATE: f32 = 6.0;
const TRIGGER_UP: f32 = 3.0;
const TRIGGER_NOISE: f64 = 0.3;
const BIAS_VALUE: f32 = 1.5;
const GATE_NORM_WEIGHT: f32 = 20.0;
const GATE_GAIN: f32 = 0.3;
const UP_GAIN: f32 = 80.0;
const KEY_SHARE: f64 = 0.72;
const ENERGY_MASSIVE: f64 = 0.40;
const ENERGY_KEYS: f64 = 0.35;

const SIGMA_QK: f64 = 0.07;
const SIGMA_VO: f64 = 0.05;
const SIGMA_GATE_UP: f64 = 0.125;
const SIGMA_DOWN: f64 = 0.025;

/// Generator arguments, recorded alongside every synthetic archive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub target_layer: usize,
    pub jump_factor: f64,
    pub sink_strength: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(target_layer: usize, seed: u64) -> Self {
        Self {
            target_layer,
            jump_factor: DEFAULT_JUMP,
            sink_strength: DEFAULT_SINK_STRENGTH,
            seed,
        }
    }
}

/// Role of each hidden dimension in a synthetic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    pub trigger: TokenId,
    pub gate_dim: usize,
    pub up_dim: usize,
    pub bias_dim: usize,
    pub massive_dim: usize,
    pub key_dims: Vec<usize>,
    pub value_dims: Vec<usize>,
    /// FFN unit of the target layer that produces the massive activation.
    pub ffn_unit: usize,
    /// Unit-norm direction written by that unit.
    pub direction: Vec<f32>,
    /// Per-head coordinate used as the sink channel.
    pub sink_coord: usize,
}

/// A generated bundle plus the solved calibration constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    pub bundle: ModelBundle,
    pub params: SynthParams,
    pub layout: SynthLayout,
    /// Scale of the massive unit's `W_down` row.
    pub write_scale: f64,
    /// Pre-FFN norm weight on `up_dim` at the target layer.
    pub up_norm_weight: f64,
    /// Key gain per shaped layer.
    pub sink_gains: BTreeMap<usize, f64>,
}

impl SynthModel {
    /// Archive metadata describing how the bundle was produced.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), "melab synth".into());
        m.insert(
            "synth_params".into(),
            serde_json::to_string(&self.params).expect("params serialise"),
        );
        m.insert("trigger".into(), self.layout.trigger.to_string());
        m
    }
}

/// Default oracle architecture: `d_model = 64`, 4 query heads over 2 KV
/// heads, `d_ff = 128`, no rotary embeddings.
pub fn synth_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 64,
        n_heads: 4,
        n_kv_heads: 2,
        d_head: 16,
        d_ff: 128,
        vocab_size: 256,
        rope_enabled: false,
        rope_theta: 10_000.0,
        norm_eps: 1e-6,
    }
}

/// Trigger at position 0 followed by `len − 1` ids drawn uniformly from
/// the non-trigger vocabulary.
pub fn synth_tokens(vocab_size: usize, len: usize, seed: u64) -> Result<Vec<TokenId>> {
    if len == 0 {
        return Err(Error::EmptyInput { op: "synth_tokens" });
    }
    if vocab_size < 2 {
        return Err(Error::InvalidArgument(
            "synthetic inputs need a vocabulary of at least 2 ids".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![TRIGGER];
    out.extend((1..len).map(|_| rng.random_range(1..vocab_size as TokenId)));
    Ok(out)
}

/// Builds a synthetic oracle; see the module docs for the construction.
pub fn synth_model(
    config: &ModelConfig,
    target_layer: usize,
    jump_factor: f64,
    sink_strength: f64,
    seed: u64,
) -> Result<ModelBundle> {
    let params = SynthParams {
        target_layer,
        jump_factor,
        sink_strength,
        seed,
    };
    Ok(synth_model_detailed(config, params)?.bundle)
}

fn check(config: &ModelConfig, p: &SynthParams) -> Result<()> {
    config.validate()?;
    let n = config.n_layers;
    let bad = |m: String| Err(Error::Infeasible(m));
    if n < 3 {
        return bad(format!("need at least 3 layers, got {n}"));
    }
    if p.target_layer < 1 || p.target_layer > n - 2 {
        return bad(format!(
            "target layer {} outside 1..={}",
            p.target_layer,
            n - 2
        ));
    }
    if !(p.jump_factor.is_finite() && p.jump_factor >= 100.0) {
        return bad(format!("jump factor {} must be ≥ 100", p.jump_factor));
    }
    if !(p.sink_strength.is_finite() && p.sink_strength >= 0.0) {
        return bad(format!("sink strength {} must be ≥ 0", p.sink_strength));
    }
    if config.d_model < 8 {
        return bad(format!("d_model {} < 8", config.d_model));
    }
    if config.d_ff < 2 || config.vocab_size < 2 {
        return bad("d_ff and vocab_size must be at least 2".into());
    }
    if config.rope_enabled && config.d_head < 2 {
        return bad("rotary embeddings need d_head ≥ 2".into());
    }
    Ok(())
}

fn layout(config: &ModelConfig, rng: &mut ChaCha8Rng) -> SynthLayout {
    let d = config.d_model;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    let rest = d - 3;
    let n_keys = ((KEY_SHARE * rest as f64).round() as usize).clamp(1, rest - 2);
    let mut key_dims = perm[3..3 + n_keys].to_vec();
    let value_dims = perm[3 + n_keys..].to_vec();
    let massive_dim = value_dims[0];
    key_dims.sort_unstable();

    // direction: fixed energy on the massive dim and the key dims
    let mut u = vec![0.0f64; d];
    u[massive_dim] = ENERGY_MASSIVE.sqrt();
    let per_key = (ENERGY_KEYS / n_keys as f64).sqrt();
    for &i in &key_dims {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        u[i] = sign * per_key * rng.random_range(0.9..1.1);
    }
    let others = &value_dims[1..];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for &i in others {
        u[i] = normal.sample(rng);
    }
    let rescale = |u: &mut [f64], dims: &[usize], energy: f64| {
        let e: f64 = dims.iter().map(|&i| u[i] * u[i]).sum();
        let s = if e > 0.0 { (energy / e).sqrt() } else { 0.0 };
        dims.iter().for_each(|&i| u[i] *= s);
    };
    rescale(&mut u, &key_dims, ENERGY_KEYS);
    rescale(&mut u, others, 1.0 - ENERGY_MASSIVE - ENERGY_KEYS);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut value_sorted = value_dims;
    value_sorted.sort_unstable();

    SynthLayout {
        trigger: TRIGGER,
        gate_dim: perm[0],
        up_dim: perm[1],
        bias_dim: perm[2],
        massive_dim,
        key_dims,
        value_dims: value_sorted,
        ffn_unit: rng.random_range(0..config.d_ff),
        direction: u.iter().map(|v| (v / norm) as f32).collect(),
        sink_coord: (config.d_head / 2).saturating_sub(1),
    }
}

fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = (0..rows * cols)
        .map(|_| normal.sample(rng) as f32)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

fn zero_rows(t: &mut Tensor, rows: &[usize]) {
    for &r in rows {
        t.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
}

fn zero_cols(t: &mut Tensor, cols: &[usize]) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        cols.iter().for_each(|&c| row[c] = 0.0);
    }
}

fn norm_weights(d: usize, lay: &SynthLayout, rng: &mut ChaCha8Rng) -> Tensor {
    let uni = Uniform::new(0.85f32, 1.25).expect("valid range");
    let mut w: Vec<f32> = (0..d).map(|_| uni.sample(rng)).collect();
    for i in [lay.gate_dim, lay.up_dim, lay.bias_dim] {
        w[i] = 0.9;
    }
    Tensor::from_vec(w)
}

fn random_layer(cfg: &ModelConfig, lay: &SynthLayout, rng: &mut ChaCha8Rng) -> LayerWeights {
    let d = cfg.d_model;
    let qd = cfg.n_heads * cfg.d_head;
    let kvd = cfg.kv_dim();
    let unread = [lay.gate_dim, lay.up_dim];
    let unwritten = [lay.gate_dim, lay.up_dim, lay.bias_dim];
    let read = |cols: usize, sigma: f64, rng: &mut ChaCha8Rng| {
        let mut t = gaussian(d, cols, sigma, rng);
        zero_rows(&mut t, &unread);
        t
    };
    let w_q = read(qd, SIGMA_QK, rng);
    let w_k = read(kvd, SIGMA_QK, rng);
    let w_v = read(kvd, SIGMA_VO, rng);
    let w_gate = read(cfg.d_ff, SIGMA_GATE_UP, rng);
    let w_up = read(cfg.d_ff, SIGMA_GATE_UP, rng);
    let mut w_o = gaussian(qd, d, SIGMA_VO, rng);
    zero_cols(&mut w_o, &unwritten);
    let mut w_down = gaussian(cfg.d_ff, d, SIGMA_DOWN, rng);
    zero_cols(&mut w_down, &unwritten);
    LayerWeights {
        attn_norm_w: norm_weights(d, lay, rng),
        w_q,
        w_k,
        w_v,
        w_o,
        ffn_norm_w: norm_weights(d, lay, rng),
        w_gate,
        w_up,
        w_down,
    }
}

fn embedding(cfg: &ModelConfig, lay: &SynthLayout, rng: &mut ChaCha8Rng) -> Tensor {
    let d = cfg.d_model;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut e = Tensor::zeros(&[cfg.vocab_size, d]);
    for id in 0..cfg.vocab_size {
        let row = e.row_mut(id);
        let trigger = id == lay.trigger as usize;
        for i in lay.key_dims.iter().chain(&lay.value_dims) {
            let z = std.sample(rng);
            row[*i] = if trigger {
                (z * TRIGGER_NOISE) as f32
            } else {
                z as f32
            };
        }
        if trigger {
            row[lay.gate_dim] = TRIGGER_GATE;
            row[lay.up_dim] = TRIGGER_UP;
        } else {
            row[lay.bias_dim] = BIAS_VALUE;
        }
    }
    e
}

/// Smallest positive `t` with `‖p + t·z‖ = target`.
fn solve_scale(p: &[f64], z: &[f64], target: f64) -> Result<f64> {
    let zz: f64 = z.iter().map(|v| v * v).sum();
    let pz: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    if zz == 0.0 || pp >= target * target {
        return Err(Error::Infeasible(format!(
            "cannot reach block-output norm {target:.3} (base {:.3})",
            pp.sqrt()
        )));
    }
    let disc = pz * pz - zz * (pp - target * target);
    Ok((-pz + disc.sqrt()) / zz)
}

fn row_f64(t: &Tensor, r: usize) -> Vec<f64> {
    t.row(r).iter().map(|&v| f64::from(v)).collect()
}

/// Builds a synthetic oracle and returns it with its layout and the solved
/// calibration constants.
pub fn synth_model_detailed(config: &ModelConfig, params: SynthParams) -> Result<SynthModel> {
    check(config, &params)?;
    let cfg = config;
    let d = cfg.d_model;
    let lt = params.target_layer;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let lay = layout(cfg, &mut rng);

    let mut layers: Vec<LayerWeights> = (0..cfg.n_layers)
        .map(|_| random_layer(cfg, &lay, &mut rng))
        .collect();
    let emb = embedding(cfg, &lay, &mut rng);
    let final_norm_w = norm_weights(d, &lay, &mut rng);

    // target layer: the massive FFN unit, with a zero write row until solved
    {
        let w = &mut layers[lt];
        let unit = lay.ffn_unit;
        zero_cols_single(&mut w.w_gate, unit);
        zero_cols_single(&mut w.w_up, unit);
        w.w_gate.row_mut(lay.gate_dim)[unit] = GATE_GAIN;
        w.w_up.row_mut(lay.up_dim)[unit] = UP_GAIN;
        w.w_down.row_mut(unit).iter_mut().for_each(|v| *v = 0.0);
        w.ffn_norm_w.data_mut()[lay.gate_dim] = GATE_NORM_WEIGHT;
        w.ffn_norm_w.data_mut()[lay.up_dim] = 1.0;
    }

    let shaped: Vec<usize> = if params.sink_strength > 0.0 {
        (lt + 1..cfg.n_layers).collect()
    } else {
        Vec::new()
    };
    for &l in &shaped {
        shape_sink_layer(cfg, &lay, &mut layers[l], &mut rng);
    }

    let mut bundle = ModelBundle {
        config: cfg.clone(),
        embedding: emb,
        layers,
        final_norm_w,
    };

    // closed-form calibration on the trigger's own trajectory
    let trig = [lay.trigger];
    let cap = CaptureSpec::taps(&[
        TapPoint::BlockInput,
        TapPoint::PostAttnResidual,
        TapPoint::FfnDownOut,
    ])
    .at_layers([lt]);
    let plain = forward(&bundle, &trig, &cap, &Intervention::None)?;
    let ablated = forward(&bundle, &trig, &cap, &Intervention::AblateFFNNorm(lt))?;
    let x_in = l2_norm(plain.tensor(lt, TapPoint::BlockInput)?.row(0));
    let r = row_f64(plain.tensor(lt, TapPoint::PostAttnResidual)?, 0);
    let u: Vec<f64> = lay.direction.iter().map(|&v| f64::from(v)).collect();

    let base_abl: Vec<f64> = r
        .iter()
        .zip(row_f64(ablated.tensor(lt, TapPoint::FfnDownOut)?, 0))
        .map(|(a, b)| a + b)
        .collect();
    let g_abl = silu_scalar(GATE_GAIN * r[lay.gate_dim] as f32) as f64;
    let coef_abl = g_abl * f64::from(UP_GAIN) * r[lay.up_dim];
    let z_abl: Vec<f64> = u.iter().map(|v| v * coef_abl).collect();
    let write_scale = solve_scale(
        &base_abl,
        &z_abl,
        params.jump_factor / NORM_ABLATION_FACTOR * x_in,
    )?;

    let ms = r.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let inv_rms = 1.0 / (ms + cfg.norm_eps).sqrt();
    let y_gate = (r[lay.gate_dim] * inv_rms * f64::from(GATE_NORM_WEIGHT)) as f32;
    let g = silu_scalar(GATE_GAIN * y_gate) as f64;
    let base: Vec<f64> = r
        .iter()
        .zip(row_f64(plain.tensor(lt, TapPoint::FfnDownOut)?, 0))
        .map(|(a, b)| a + b)
        .collect();
    let coef = write_scale * g * f64::from(UP_GAIN) * r[lay.up_dim] * inv_rms;
    let z: Vec<f64> = u.iter().map(|v| v * coef).collect();
    let up_norm_weight = solve_scale(&base, &z, params.jump_factor * x_in)?;

    {
        let w = &mut bundle.layers[lt];
        for (dst, &v) in w.w_down.row_mut(lay.ffn_unit).iter_mut().zip(&u) {
            *dst = (write_scale * v) as f32;
        }
        w.ffn_norm_w.data_mut()[lay.up_dim] = up_norm_weight as f32;
    }

    // sink gains, layer by layer, from a seeded calibration input
    let mut sink_gains = BTreeMap::new();
    if !shaped.is_empty() {
        let calib = synth_tokens(cfg.vocab_size, 32, params.seed ^ 0x5EED_CA11)?;
        let dh = cfg.d_head;
        for &l in &shaped {
            let cap =
                CaptureSpec::taps(&[TapPoint::BlockInput, TapPoint::AttnNormOut]).at_layers([l]);
            let tr = forward(&bundle, &calib, &cap, &Intervention::None)?;
            let x0 = tr.tensor(l, TapPoint::BlockInput)?.row(0).to_vec();
            let rms0 = (dot(&x0, &x0) / d as f64 + cfg.norm_eps).sqrt();
            let a = tr.tensor(l, TapPoint::AttnNormOut)?;
            let mean_bias = (1..a.rows())
                .map(|t| f64::from(a.row(t)[lay.bias_dim]))
                .sum::<f64>()
                / (a.rows() - 1) as f64;
            let key_mass: f64 = lay
                .key_dims
                .iter()
                .map(|&i| f64::from(x0[i]).abs() / rms0)
                .sum();
            if mean_bias <= 0.0 || key_mass <= 0.0 {
                return Err(Error::Infeasible(format!(
                    "no sink signal available at layer {l}"
                )));
            }
            let gain = params.sink_strength * (dh as f64).sqrt() / (mean_bias * key_mass);
            let w = &mut bundle.layers[l];
            let attn_w = w.attn_norm_w.data().to_vec();
            for g in 0..cfg.n_kv_heads {
                let col = g * dh + lay.sink_coord;
                for &i in &lay.key_dims {
                    let sign = if x0[i] < 0.0 { -1.0 } else { 1.0 };
                    w.w_k.row_mut(i)[col] = (gain * sign / f64::from(attn_w[i])) as f32;
                }
            }
            sink_gains.insert(l, gain);
        }
    }

    Ok(SynthModel {
        bundle,
        params,
        layout: lay,
        write_scale,
        up_norm_weight,
        sink_gains,
    })
}

fn zero_cols_single(t: &mut Tensor, col: usize) {
    zero_cols(t, &[col]);
}

/// Graded key-dim norm weights, value path cut from the key dims, and a
/// clean sink coordinate per head (keys filled in after calibration).
fn shape_sink_layer(
    cfg: &ModelConfig,
    lay: &SynthLayout,
    w: &mut LayerWeights,
    rng: &mut ChaCha8Rng,
) {
    let n_keys = lay.key_dims.len();
    let mut grades: Vec<f32> = (0..n_keys)
        .map(|j| {
            let step = if n_keys > 1 {
                j as f32 / (n_keys - 1) as f32
            } else {
                0.0
            };
            3.0 - 1.4 * step
        })
        .collect();
    grades.shuffle(rng);
    let uni = Uniform::new(0.5f32, 1.0).expect("valid range");
    let attn = w.attn_norm_w.data_mut();
    for (&i, &g) in lay.key_dims.iter().zip(&grades) {
        attn[i] = g;
    }
    for &i in &lay.value_dims {
        attn[i] = uni.sample(rng);
    }
    attn[lay.bias_dim] = 1.0;
    attn[lay.gate_dim] = 0.5;
    attn[lay.up_dim] = 0.5;

    zero_rows(&mut w.w_v, &lay.key_dims);
    zero_rows(&mut w.w_k, &lay.key_dims);
    let dh = cfg.d_head;
    for g in 0..cfg.n_kv_heads {
        zero_cols_single(&mut w.w_k, g * dh + lay.sink_coord);
    }
    for h in 0..cfg.n_heads {
        let col = h * dh + lay.sink_coord;
        zero_cols_single(&mut w.w_q, col);
        w.w_q.row_mut(lay.bias_dim)[col] = 1.0;
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented forward pass against the naive double-precision oracle.

mod common;

use melab::model::{random_model, ModelConfig};
use melab::synth::{synth_config, synth_model, synth_tokens};
use melab::transformer::{forward, CaptureSpec, Intervention, TapPoint};
use melab_reference::reference_forward;

use common::{flatten, flatten3, rel_err, to_reference};

fn check_all_taps(m: &melab::model::ModelBundle, tokens: &[u32], tol: f64) {
    let tr = forward(m, tokens, &CaptureSpec::all(), &Intervention::None).unwrap();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let oracle = reference_forward(&to_reference(m), &ids);
    for (l, o) in oracle.iter().enumerate() {
        let pairs = [
            (TapPoint::BlockInput, flatten(&o.block_input)),
            (TapPoint::AttnNormOut, flatten(&o.attn_norm_out)),
            (TapPoint::AttnScores, flatten3(&o.attn_scores)),
            (TapPoint::AttnProbs, flatten3(&o.attn_probs)),
            (TapPoint::AttnOut, flatten(&o.attn_out)),
            (TapPoint::PostAttnResidual, flatten(&o.post_attn_residual)),
            (TapPoint::FfnNormOut, flatten(&o.ffn_norm_out)),
            (TapPoint::FfnGateOut, flatten(&o.ffn_gate_out)),
            (TapPoint::FfnUpOut, flatten(&o.ffn_up_out)),
            (TapPoint::FfnDownOut, flatten(&o.ffn_down_out)),
            (TapPoint::BlockOutput, flatten(&o.block_output)),
        ];
        for (tap, expect) in pairs {
            let err = rel_err(tr.tensor(l, tap).unwrap().data(), &expect);
            assert!(err <= tol, "layer {l} {tap}: rel err {err:e}");
        }
    }
}

fn config(n_heads: usize, n_kv: usize, rope: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads,
        n_kv_heads: n_kv,
        d_head: 32 / n_heads,
        d_ff: 64,
        vocab_size: 50,
        rope_enabled: rope,
        rope_theta: 10_000.0,
        norm_eps: 1e-6,
    }
}

#[test]
fn random_models_match_oracle() {
    let tokens = [3, 14, 15, 9, 26, 5, 35, 8];
    for seed in 0..5 {
        check_all_taps(
            &random_model(&config(4, 4, true), seed).unwrap(),
            &tokens,
            1e-4,
        );
    }
}

#[test]
fn grouped_kv_and_no_rope_match_oracle() {
    let tokens = [1, 2, 3, 4, 5, 6, 7, 49, 0, 11];
    check_all_taps(
        &random_model(&config(4, 2, true), 7).unwrap(),
        &tokens,
        1e-4,
    );
    check_all_taps(
        &random_model(&config(8, 1, false), 8).unwrap(),
        &tokens,
        1e-4,
    );
}

#[test]
fn synthetic_oracle_matches_reference() {
    let cfg = synth_config(5);
    let m = synth_model(&cfg, 2, 300.0, 5.0, 4).unwrap();
    check_all_taps(&m, &synth_tokens(cfg.vocab_size, 12, 2).unwrap(), 1e-4);
}

#[test]
fn oracle_comparison_detects_a_perturbed_weight() {
    let m = random_model(&config(4, 4, true), 1).unwrap();
    let mut broken = m.clone();
    broken.layers[1].w_up.data_mut()[17] += 0.05;
    let tokens = [3u32, 14, 15, 9, 26, 5, 35, 8];
    let tr = forward(&broken, &tokens, &CaptureSpec::all(), &Intervention::None).unwrap();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let oracle = reference_forward(&to_reference(&m), &ids);
    let err = rel_err(
        tr.tensor(1, TapPoint::FfnUpOut).unwrap().data(),
        &flatten(&oracle[1].ffn_up_out),
    );
    assert!(err > 1e-4, "perturbation went unnoticed: {err:e}");
}

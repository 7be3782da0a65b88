// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end flows: generate, persist, reload, detect, mask, score sinks.

use melab::archive::{encode_archive, read_archive};
use melab::detector::{detect_me_layer, DEFAULT_EXCLUDE_TAIL, DEFAULT_THRESHOLD};
use melab::diagnostics::norm_profile;
use melab::model::{load_model, random_model, ModelBundle};
use melab::sink::{sink_comparison, sink_score, uniform_baseline};
use melab::synth::{synth_config, synth_model, synth_model_detailed, synth_tokens, SynthParams};
use melab::transformer::{forward, CaptureSpec, Intervention, TapPoint};
use melab::wemask::{build_mask, MaskPolicy, TokenMode};

fn detect(m: &ModelBundle, seed: u64) -> Option<(usize, usize, f64)> {
    let toks = synth_tokens(m.config.vocab_size, 16, seed).unwrap();
    let tr = forward(m, &toks, &CaptureSpec::none(), &Intervention::None).unwrap();
    let p = norm_profile(&tr, TapPoint::BlockOutput).unwrap();
    detect_me_layer(&p, DEFAULT_THRESHOLD, DEFAULT_EXCLUDE_TAIL)
        .unwrap()
        .map(|d| (d.layer, d.token, d.jump_ratio))
}

#[test]
fn archive_round_trip_preserves_detection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(12);
    let sm = synth_model_detailed(&cfg, SynthParams::new(7, 3)).unwrap();
    let path = dir.path().join("model.safetensors");
    sm.bundle.save(&path, &sm.metadata()).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let (manifest, tensors) = read_archive(&path).unwrap();
    let meta = manifest.metadata.unwrap();
    assert_eq!(meta["generator"], "melab synth");
    assert_eq!(encode_archive(&tensors, &meta).unwrap(), bytes);

    let loaded = load_model(cfg, &path).unwrap();
    assert_eq!(loaded, sm.bundle);
    let a = detect(&sm.bundle, 5).unwrap();
    let b = detect(&loaded, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.0, a.1), (7, 0));
}

#[test]
fn engineered_layer_found_across_suffixes() {
    let m = synth_model(&synth_config(12), 7, 300.0, 5.0, 0).unwrap();
    for s in 0..20 {
        let (l, t, r) = detect(&m, 500 + s).unwrap();
        assert_eq!((l, t), (7, 0));
        assert!(r > 100.0, "ratio {r}");
    }
}

#[test]
fn synthesis_is_seed_deterministic() {
    let cfg = synth_config(6);
    let a = synth_model(&cfg, 3, 300.0, 5.0, 9).unwrap();
    let b = synth_model(&cfg, 3, 300.0, 5.0, 9).unwrap();
    let c = synth_model(&cfg, 3, 300.0, 5.0, 10).unwrap();
    let enc = |m: &ModelBundle| encode_archive(&m.to_tensors(), &Default::default()).unwrap();
    assert_eq!(enc(&a), enc(&b));
    assert_ne!(enc(&a), enc(&c));
}

#[test]
fn sink_needs_shaping() {
    let cfg = synth_config(8);
    let toks = synth_tokens(cfg.vocab_size, 16, 77).unwrap();
    let cap = CaptureSpec::taps(&[TapPoint::AttnProbs]);
    let score = |m: &ModelBundle| {
        let tr = forward(m, &toks, &cap, &Intervention::None).unwrap();
        sink_score(&tr, 0).unwrap()
    };
    let shaped = score(&synth_model(&cfg, 3, 300.0, 5.0, 1).unwrap());
    let flat = score(&synth_model(&cfg, 3, 300.0, 0.0, 1).unwrap());
    let rand = score(&random_model(&cfg, 1).unwrap());
    assert!(shaped.layer_mean[4] > 0.5);
    assert_eq!(shaped.emergence_layer, Some(4));
    let base = uniform_baseline(16);
    for r in [&flat, &rand] {
        assert!(r.layer_mean[4] < 0.5);
        assert_eq!(r.emergence_layer, None);
        assert!(
            (r.layer_mean[4] - base).abs() < 0.2,
            "{} vs {base}",
            r.layer_mean[4]
        );
    }
}

#[test]
fn full_mask_removes_sink_key() {
    let cfg = synth_config(8);
    let m = synth_model(&cfg, 3, 300.0, 5.0, 2).unwrap();
    let toks = synth_tokens(cfg.vocab_size, 16, 3).unwrap();
    let full = build_mask(
        &m,
        3,
        1.0,
        MaskPolicy::AllAfterMe,
        TokenMode::MassiveToken(0),
    )
    .unwrap();
    let tr = forward(
        &m,
        &toks,
        &CaptureSpec::all(),
        &Intervention::WeMask(full.clone()),
    )
    .unwrap();
    // A zero attention input gives the massive token a zero key, hence a
    // zero logit in every query row and head of the covered layers.
    for l in 3..8 {
        assert!(tr
            .tensor(l, TapPoint::AttnNormOut)
            .unwrap()
            .row(0)
            .iter()
            .all(|&v| v == 0.0));
        let s = tr.tensor(l, TapPoint::AttnScores).unwrap();
        for h in 0..cfg.n_heads {
            for q in 0..16 {
                assert_eq!(s.data()[(h * 16 + q) * 16], 0.0);
            }
        }
    }
    let c = sink_comparison(&m, &toks, &[full], 0).unwrap();
    assert!(c.baseline.layer_mean[4] > 0.5);
    assert!(c.runs[0].report.layer_mean[4] < c.baseline.uniform_baseline * 2.0);
    assert!(c.runs[0].layer_delta[4] < -0.3);
}

#[test]
fn sink_scores_fall_with_rate() {
    let cfg = synth_config(12);
    let m = synth_model(&cfg, 7, 300.0, 5.0, 4).unwrap();
    let toks = synth_tokens(cfg.vocab_size, 16, 8).unwrap();
    let specs: Vec<_> = [0.0, 0.25, 0.5]
        .iter()
        .map(|&r| build_mask(&m, 7, r, MaskPolicy::AllAfterMe, TokenMode::MassiveToken(0)).unwrap())
        .collect();
    let c = sink_comparison(&m, &toks, &specs, 0).unwrap();
    let at = |i: usize| c.runs[i].report.layer_mean[8];
    assert!(c.baseline.layer_mean[8] > 0.5);
    assert_eq!(at(0), c.baseline.layer_mean[8]);
    assert!(at(0) > at(1) && at(1) > at(2));
    assert!(at(2) > c.baseline.uniform_baseline);
}

#[test]
fn me_only_mask_touches_one_layer() {
    let cfg = synth_config(8);
    let m = synth_model(&cfg, 3, 300.0, 5.0, 6).unwrap();
    let toks = synth_tokens(cfg.vocab_size, 10, 1).unwrap();
    let spec = build_mask(&m, 3, 0.5, MaskPolicy::MeOnly, TokenMode::MassiveToken(0)).unwrap();
    let base = forward(&m, &toks, &CaptureSpec::all(), &Intervention::None).unwrap();
    let masked = forward(&m, &toks, &CaptureSpec::all(), &Intervention::WeMask(spec)).unwrap();
    for l in 0..3 {
        assert_eq!(base.layers[l], masked.layers[l]);
    }
    assert_ne!(
        base.tensor(3, TapPoint::AttnNormOut).unwrap(),
        masked.tensor(3, TapPoint::AttnNormOut).unwrap()
    );
}

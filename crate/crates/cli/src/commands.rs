// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each returns the JSON summary printed on stdout.

use std::path::Path;

use serde_json::{json, Value};

use melab::detector::{detect_me_layer, max_jump_per_layer, reference_me_table, MEDetection};
use melab::diagnostics::{
    cross_similarity, diagnostics_capture, diagnostics_report, norm_profile, self_similarity,
    MetricParams, NormSite,
};
use melab::model::{load_model, ModelBundle, ModelConfig};
use melab::report::{gain_csv, heatmap_csv, layer_csv, layer_token_csv, sink_csv};
use melab::sink::{non_sink_perturbation, sink_comparison, sink_score};
use melab::synth::{synth_config, synth_model_detailed, synth_tokens, SynthParams};
use melab::transformer::{forward, ActivationTrace, CaptureSpec, Intervention, TapPoint, TokenId};
use melab::wemask::{baseline_mask, build_mask, BaselineKind, MaskSpec};

use crate::args::*;
use crate::{io_err, write_json, write_text, CliError, CliResult, Command};

pub(crate) fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::Synth(a) => Some(a.seed),
        Command::Trace(a) => Some(a.input.seed),
        Command::Detect(a) => Some(a.input.seed),
        Command::Metrics(a) => Some(a.input.seed),
        Command::Mask(a) => Some(a.input.seed),
        Command::Ablate(a) => Some(a.input.seed),
        Command::Sink(a) => Some(a.input.seed),
        Command::Similarity(a) => Some(a.seed),
        Command::ReferenceTable(_) | Command::Rerun(_) => None,
    }
}

pub(crate) fn run(cmd: &Command) -> CliResult<Value> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Trace(a) => trace(a),
        Command::Detect(a) => detect(a),
        Command::Metrics(a) => metrics(a),
        Command::Mask(a) => mask(a),
        Command::Ablate(a) => ablate(a),
        Command::Sink(a) => sink(a),
        Command::Similarity(a) => similarity(a),
        Command::ReferenceTable(a) => reference_table(a),
        Command::Rerun(_) => Err(CliError::Invalid(
            "a run record cannot replay a rerun".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

fn load(m: &ModelArgs) -> CliResult<ModelBundle> {
    for p in [&m.config, &m.archive] {
        if !p.exists() {
            return Err(CliError::Invalid(format!("{}: no such file", p.display())));
        }
    }
    let config = ModelConfig::load(&m.config)?;
    Ok(load_model(config, &m.archive)?)
}

fn read_tokens(path: &Path) -> CliResult<Vec<TokenId>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!(
            "{}: expected a JSON array of non-negative integers ({e})",
            path.display()
        ))
    })
}

fn tokens(model: &ModelBundle, input: &InputArgs) -> CliResult<Vec<TokenId>> {
    match &input.tokens {
        Some(p) => read_tokens(p),
        None => Ok(synth_tokens(
            model.config.vocab_size,
            input.len,
            input.seed,
        )?),
    }
}

fn detection(
    model: &ModelBundle,
    toks: &[TokenId],
    flags: &DetectFlags,
) -> CliResult<Option<MEDetection>> {
    let tr = forward(model, toks, &CaptureSpec::none(), &Intervention::None)?;
    let profile = norm_profile(&tr, TapPoint::BlockOutput)?;
    Ok(detect_me_layer(
        &profile,
        flags.threshold,
        flags.exclude_tail,
    )?)
}

/// Emergence layer and massive token, from flags or detection.
fn resolve_me(
    model: &ModelBundle,
    toks: &[TokenId],
    me_layer: Option<usize>,
    massive: Option<usize>,
    flags: &DetectFlags,
) -> CliResult<(usize, usize, Option<MEDetection>)> {
    if let Some(l) = me_layer {
        return Ok((l, massive.unwrap_or(0), None));
    }
    match detection(model, toks, flags)? {
        Some(d) => Ok((d.layer, massive.unwrap_or(d.token), Some(d))),
        None => Err(CliError::Invalid(
            "no emergence layer detected; pass --me-layer".into(),
        )),
    }
}

fn make_mask(
    model: &ModelBundle,
    toks: &[TokenId],
    rate: f64,
    me_layer: usize,
    massive: usize,
    flags: &MaskFlags,
    seed: u64,
) -> CliResult<MaskSpec> {
    let policy = flags.policy.into();
    let mode = flags.token_mode.resolve(massive);
    let spec = match flags.mask_kind {
        MaskKindArg::Weight => build_mask(model, me_layer, rate, policy, mode)?,
        MaskKindArg::Random => baseline_mask(
            model,
            me_layer,
            rate,
            policy,
            mode,
            BaselineKind::Random { seed },
            None,
        )?,
        MaskKindArg::Magnitude => {
            let cap = CaptureSpec::taps(&[TapPoint::AttnNormOut]);
            let reference = forward(model, toks, &cap, &Intervention::None)?;
            baseline_mask(
                model,
                me_layer,
                rate,
                policy,
                mode,
                BaselineKind::Magnitude,
                Some(&reference),
            )?
        }
    };
    Ok(spec.with_insertion(flags.insertion.into()))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn synth(a: &SynthArgs) -> CliResult<Value> {
    let config = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => synth_config(a.layers),
    };
    let params = SynthParams {
        target_layer: a.target,
        jump_factor: a.jump,
        sink_strength: a.sink_strength,
        seed: a.seed,
    };
    let sm = synth_model_detailed(&config, params)?;
    let dir = &a.out.out;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    sm.bundle
        .save(dir.join("model.safetensors"), &sm.metadata())?;
    config.save(dir.join("config.json"))?;
    let report = json!({
        "params": sm.params,
        "layout": sm.layout,
        "write_scale": sm.write_scale,
        "up_norm_weight": sm.up_norm_weight,
        "sink_gains": sm.sink_gains,
        "archive": "model.safetensors",
        "config": "config.json",
    });
    write_json(&dir.join("synth.json"), &report)?;
    Ok(report)
}

fn trace(a: &TraceArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let mut capture = if a.taps.is_empty() {
        CaptureSpec::all()
    } else {
        CaptureSpec::taps(&a.taps)
    };
    if !a.capture_layers.is_empty() {
        capture = capture.at_layers(a.capture_layers.iter().copied());
    }
    let iv = match a.intervention {
        TraceIntervention::None => Intervention::None,
        TraceIntervention::AblateFfn | TraceIntervention::AblateFfnNorm => {
            let (l, _, _) = resolve_me(&model, &toks, a.mask.me_layer, None, &a.mask.detect)?;
            if a.intervention == TraceIntervention::AblateFfn {
                Intervention::AblateFFN(l)
            } else {
                Intervention::AblateFFNNorm(l)
            }
        }
        TraceIntervention::Mask => {
            let (l, t, _) = resolve_me(
                &model,
                &toks,
                a.mask.me_layer,
                a.mask.massive_token,
                &a.mask.detect,
            )?;
            let spec = make_mask(&model, &toks, a.rate, l, t, &a.mask, a.input.seed)?;
            melab::sink::mask_intervention(&spec)
        }
    };
    let tr = forward(&model, &toks, &capture, &iv)?;
    let dir = &a.out.out;
    write_json(&dir.join("trace.json"), &tr)?;
    for tap in TapPoint::ALL.into_iter().filter(|t| t.is_token_indexed()) {
        let table = norm_profile(&tr, tap)?;
        write_text(
            &dir.join(format!("norms_{tap}.csv")),
            &layer_token_csv(&table),
        )?;
    }
    let saved: Vec<String> = capture.taps.iter().map(|t| t.to_string()).collect();
    Ok(json!({
        "tokens": tr.token_ids,
        "n_layers": tr.n_layers(),
        "intervention": tr.intervention,
        "saved_taps": saved,
        "trace": "trace.json",
    }))
}

fn detect(a: &DetectArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let tr = forward(&model, &toks, &CaptureSpec::none(), &Intervention::None)?;
    let profile = norm_profile(&tr, TapPoint::BlockOutput)?;
    let det = detect_me_layer(&profile, a.detect.threshold, a.detect.exclude_tail)?;
    let jumps: Vec<Value> = max_jump_per_layer(&profile)
        .into_iter()
        .enumerate()
        .map(|(i, j)| match j {
            Some((t, r)) => json!({"layer": i + 1, "token": t, "ratio": r}),
            None => json!({"layer": i + 1, "token": null, "ratio": null}),
        })
        .collect();
    let report = json!({
        "detection": det,
        "threshold": a.detect.threshold,
        "exclude_tail": a.detect.exclude_tail,
        "tokens": toks,
        "max_jump_per_layer": jumps,
    });
    let dir = &a.out.out;
    write_json(&dir.join("detect.json"), &report)?;
    write_text(&dir.join("norm_profile.csv"), &layer_token_csv(&profile))?;
    Ok(report)
}

fn metrics(a: &MetricsArgs) -> CliResult<Value> {
    if !(a.topk_frac > 0.0 && a.topk_frac <= 1.0) {
        return Err(CliError::Invalid(format!(
            "--topk-frac must lie in (0, 1], got {}",
            a.topk_frac
        )));
    }
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let d = model.d_model();
    let topk = ((a.topk_frac * d as f64 - 1e-9).ceil() as usize).clamp(1, d);
    let params = MetricParams {
        site: match a.site {
            SiteArg::PreFfn => NormSite::PreFfn,
            SiteArg::PreAttention => NormSite::PreAttention,
        },
        topk,
        massive_token: a.massive_token,
    };
    let tr = forward(&model, &toks, &diagnostics_capture(), &Intervention::None)?;
    let r = diagnostics_report(&tr, &model, params)?;
    let dir = &a.out.out;
    write_json(&dir.join("metrics.json"), &r)?;
    write_text(
        &dir.join("norm_profile.csv"),
        &layer_token_csv(&r.norm_profile),
    )?;
    write_text(
        &dir.join("weight_norm.csv"),
        &layer_token_csv(&r.weight_norm),
    )?;
    write_text(
        &dir.join("frac_delta.csv"),
        &layer_csv("frac_delta", &r.frac_delta),
    )?;
    write_text(
        &dir.join("kl_delta.csv"),
        &layer_csv("kl_delta", &r.kl_delta),
    )?;
    for (name, table, gap) in [
        ("gate", &r.concentration_gate, &r.concentration_gap[0]),
        ("up", &r.concentration_up, &r.concentration_gap[1]),
        ("down", &r.concentration_down, &r.concentration_gap[2]),
    ] {
        write_text(
            &dir.join(format!("concentration_{name}.csv")),
            &layer_token_csv(table),
        )?;
        write_text(
            &dir.join(format!("concentration_gap_{name}.csv")),
            &layer_csv("concentration_gap", gap),
        )?;
    }
    write_text(&dir.join("amplification.csv"), &gain_csv(&r.amplification))?;
    Ok(json!({
        "params": r.params,
        "frac_delta": r.frac_delta,
        "kl_delta": r.kl_delta,
        "concentration_gap": r.concentration_gap,
        "amplification_max": r.amplification.argmax().map(|(l, t, v)| json!({"layer": l, "token": t, "value": v})),
        "amplification_definition": r.amplification_definition,
        "report": "metrics.json",
    }))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.to_bits() == y.to_bits() {
                0.0
            } else {
                (f64::from(*x) - f64::from(*y)).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn compare_traces(base: &ActivationTrace, other: &ActivationTrace) -> Value {
    let mut identical = true;
    let mut layers = Vec::new();
    for (l, (x, y)) in base.layers.iter().zip(&other.layers).enumerate() {
        let mut taps = serde_json::Map::new();
        for (tap, t) in &x.tensors {
            let u = &y.tensors[tap];
            let same = t
                .data()
                .iter()
                .zip(u.data())
                .all(|(p, q)| p.to_bits() == q.to_bits());
            identical &= same;
            taps.insert(tap.to_string(), json!(max_abs_diff(t.data(), u.data())));
        }
        layers.push(json!({"layer": l, "max_abs_diff": taps}));
    }
    json!({"identical": identical, "layers": layers})
}

fn mask(a: &MaskCmdArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let (l, t, det) = resolve_me(
        &model,
        &toks,
        a.mask.me_layer,
        a.mask.massive_token,
        &a.mask.detect,
    )?;
    let spec = make_mask(&model, &toks, a.rate, l, t, &a.mask, a.input.seed)?;
    let dir = &a.out.out;
    write_json(&dir.join("mask.json"), &spec)?;
    let mut summary = json!({"me_layer": l, "massive_token": t, "detection": det, "spec": spec});
    if a.compare {
        let cap = CaptureSpec::all();
        let base = forward(&model, &toks, &cap, &Intervention::None)?;
        let masked = forward(&model, &toks, &cap, &melab::sink::mask_intervention(&spec))?;
        let mut cmp = compare_traces(&base, &masked);
        cmp["sink_unmasked"] = json!(sink_score(&base, 0)?.layer_mean);
        cmp["sink_masked"] = json!(sink_score(&masked, 0)?.layer_mean);
        cmp["perturbation"] = json!(non_sink_perturbation(&base, &masked, t)?);
        write_json(&dir.join("compare.json"), &cmp)?;
        summary["compare"] = cmp;
    }
    Ok(summary)
}

fn ablate(a: &AblateArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let (l, _, _) = resolve_me(&model, &toks, a.me_layer, None, &a.detect)?;
    let iv = match a.kind {
        AblationArg::Ffn => Intervention::AblateFFN(l),
        AblationArg::FfnNorm => Intervention::AblateFFNNorm(l),
    };
    let profile = |iv: &Intervention| -> CliResult<_> {
        let tr = forward(&model, &toks, &CaptureSpec::none(), iv)?;
        Ok(norm_profile(&tr, TapPoint::BlockOutput)?)
    };
    let base = profile(&Intervention::None)?;
    let abl = profile(&iv)?;
    let det = |p| detect_me_layer(p, a.detect.threshold, a.detect.exclude_tail);
    let (db, da) = (det(&base)?, det(&abl)?);
    let ratio_at = |p| {
        max_jump_per_layer(p)
            .get(l.wrapping_sub(1))
            .copied()
            .flatten()
            .map(|(_, r)| r)
    };
    let report = json!({
        "layer": l,
        "intervention": iv,
        "baseline": db,
        "ablated": da,
        "baseline_jump_at_layer": ratio_at(&base),
        "ablated_jump_at_layer": ratio_at(&abl),
        "threshold": a.detect.threshold,
    });
    let dir = &a.out.out;
    write_json(&dir.join("ablate.json"), &report)?;
    write_text(
        &dir.join("norm_profile_baseline.csv"),
        &layer_token_csv(&base),
    )?;
    write_text(
        &dir.join("norm_profile_ablated.csv"),
        &layer_token_csv(&abl),
    )?;
    Ok(report)
}

fn sink(a: &SinkArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let toks = tokens(&model, &a.input)?;
    let (l, t, det) = resolve_me(
        &model,
        &toks,
        a.mask.me_layer,
        a.mask.massive_token,
        &a.mask.detect,
    )?;
    let specs = a
        .rates
        .iter()
        .map(|&r| make_mask(&model, &toks, r, l, t, &a.mask, a.input.seed))
        .collect::<CliResult<Vec<_>>>()?;
    let cmp = sink_comparison(&model, &toks, &specs, a.sink_column)?;
    let dir = &a.out.out;
    write_json(&dir.join("sink.json"), &cmp)?;
    write_text(&dir.join("sink_scores.csv"), &sink_csv(&cmp.baseline))?;
    let mut csv = String::from("layer,unmasked");
    for r in &a.rates {
        csv.push_str(&format!(",rate_{}", melab::report::fmt_g(*r)));
    }
    csv.push('\n');
    for layer in 0..model.n_layers() {
        csv.push_str(&format!(
            "{layer},{}",
            melab::report::fmt_g(cmp.baseline.layer_mean[layer])
        ));
        for run in &cmp.runs {
            csv.push(',');
            csv.push_str(&melab::report::fmt_g(run.report.layer_mean[layer]));
        }
        csv.push('\n');
    }
    write_text(&dir.join("sink_layer_mean.csv"), &csv)?;
    if !a.no_heatmaps {
        let tr = forward(
            &model,
            &toks,
            &CaptureSpec::taps(&[TapPoint::AttnProbs]),
            &Intervention::None,
        )?;
        for layer in 0..model.n_layers() {
            for h in 0..model.config.n_heads {
                let text = heatmap_csv(&tr, layer, h, TapPoint::AttnProbs)?;
                write_text(
                    &dir.join("heatmaps")
                        .join(format!("attn_probs_L{layer}_H{h}.csv")),
                    &text,
                )?;
            }
        }
    }
    let runs: Vec<Value> = cmp
        .runs
        .iter()
        .map(|r| {
            json!({
                "rate": r.spec.mask_rate,
                "layer_mean": r.report.layer_mean,
                "perturbation": r.perturbation,
            })
        })
        .collect();
    Ok(json!({
        "me_layer": l,
        "massive_token": t,
        "detection": det,
        "sink_column": a.sink_column,
        "uniform_baseline": cmp.baseline.uniform_baseline,
        "emergence_threshold": cmp.baseline.emergence_threshold,
        "emergence_layer": cmp.baseline.emergence_layer,
        "unmasked": cmp.baseline.layer_mean,
        "runs": runs,
    }))
}

fn similarity(a: &SimilarityArgs) -> CliResult<Value> {
    let model = load(&a.model)?;
    let inputs: Vec<Vec<TokenId>> = if a.tokens.is_empty() {
        (0..a.inputs as u64)
            .map(|k| synth_tokens(model.config.vocab_size, a.len, a.seed + k))
            .collect::<melab::Result<_>>()?
    } else {
        a.tokens
            .iter()
            .map(|p| read_tokens(p))
            .collect::<CliResult<_>>()?
    };
    if inputs.is_empty() {
        return Err(CliError::Invalid(
            "similarity needs at least one input".into(),
        ));
    }
    let cap = CaptureSpec::taps(&[a.tap]);
    let traces = inputs
        .iter()
        .map(|t| forward(&model, t, &cap, &Intervention::None))
        .collect::<melab::Result<Vec<_>>>()?;
    let refs: Vec<&ActivationTrace> = traces.iter().collect();
    let positions = vec![a.massive_token; traces.len()];
    let report = cross_similarity(&refs, a.tap, &positions)?;
    let within = self_similarity(&traces[0], a.tap, a.massive_token)?;
    let dir = &a.out.out;
    write_json(&dir.join("similarity.json"), &report)?;
    let mut csv = String::from("layer_a,layer_b,cosine\n");
    for (i, row) in within.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            csv.push_str(&format!("{i},{j},{}\n", melab::report::fmt_g(v)));
        }
    }
    write_text(&dir.join("similarity_within.csv"), &csv)?;
    let min_cross: Vec<f64> = (0..model.n_layers())
        .map(|l| {
            report
                .pairs
                .iter()
                .map(|p| p.matrix[l][l])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(json!({
        "tap": a.tap,
        "inputs": inputs.len(),
        "massive_token": a.massive_token,
        "min_cross_input_cosine_per_layer": min_cross,
        "report": "similarity.json",
    }))
}

fn reference_table(a: &ReferenceArgs) -> CliResult<Value> {
    let table = json!(reference_me_table());
    write_json(&a.out.out.join("reference_table.json"), &table)?;
    Ok(table)
}

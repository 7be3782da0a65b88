// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics recomputed by a second, deliberately naive implementation.

use melab::diagnostics::{
    amplification_profile, cross_similarity, frac_delta, kl_delta, projection_concentration,
    NormSite,
};
use melab::model::ModelBundle;
use melab::synth::{synth_config, synth_model, synth_tokens};
use melab::transformer::{forward, ActivationTrace, CaptureSpec, Intervention, TapPoint};

fn rows(tr: &ActivationTrace, l: usize, tap: TapPoint) -> Vec<Vec<f64>> {
    tr.tensor(l, tap)
        .unwrap()
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3)
}

fn setup() -> (ModelBundle, Vec<ActivationTrace>) {
    let cfg = synth_config(6);
    let m = synth_model(&cfg, 2, 300.0, 5.0, 12).unwrap();
    let traces = (0..3)
        .map(|k| {
            let toks = synth_tokens(cfg.vocab_size, 10, 40 + k).unwrap();
            forward(&m, &toks, &CaptureSpec::all(), &Intervention::None).unwrap()
        })
        .collect();
    (m, traces)
}

#[test]
fn frac_and_kl_match_naive() {
    let (m, traces) = setup();
    let tr = &traces[0];
    let k = 3;
    let frac = frac_delta(tr, &m, NormSite::PreFfn, k, 0).unwrap();
    let kl = kl_delta(tr, &m, NormSite::PreFfn, 0).unwrap();
    for l in 0..6 {
        let w: Vec<f64> = m.layers[l]
            .ffn_norm_w
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap().then(a.cmp(&b)));
        let top = &order[..k];
        let h = rows(tr, l, TapPoint::FfnNormOut);
        let fr: Vec<f64> = h
            .iter()
            .map(|r| {
                let e: f64 = r.iter().map(|v| v * v).sum();
                top.iter().map(|&i| r[i] * r[i]).sum::<f64>() / e
            })
            .collect();
        let naive = fr[0] - fr[1..].iter().sum::<f64>() / (fr.len() - 1) as f64;
        assert!(close(frac[l], naive), "layer {l}: {} vs {naive}", frac[l]);

        let dist = |x: &[f64]| {
            let e: f64 = x.iter().map(|v| v * v).sum();
            let p: Vec<f64> = x.iter().map(|v| (v * v / e).max(1e-12)).collect();
            let z: f64 = p.iter().sum();
            p.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let g = dist(&w);
        let kls: Vec<f64> = h
            .iter()
            .map(|r| dist(r).iter().zip(&g).map(|(p, q)| p * (p / q).ln()).sum())
            .collect();
        let naive = kls[0] - kls[1..].iter().sum::<f64>() / (kls.len() - 1) as f64;
        assert!(close(kl[l], naive), "layer {l}: {} vs {naive}", kl[l]);
    }
}

#[test]
fn concentration_amplification_similarity_match_naive() {
    let (_, traces) = setup();
    let tr = &traces[1];
    for tap in [
        TapPoint::FfnGateOut,
        TapPoint::FfnUpOut,
        TapPoint::FfnDownOut,
    ] {
        let c = projection_concentration(tr, tap).unwrap();
        for l in 0..6 {
            for (t, r) in rows(tr, l, tap).iter().enumerate() {
                let e: f64 = r.iter().map(|v| v * v).sum();
                let naive: f64 = r.iter().map(|v| (v * v / e).powi(2)).sum();
                assert!(close(c.values[l][t], naive));
            }
        }
    }
    let amp = amplification_profile(tr).unwrap();
    for l in 0..6 {
        let num = rows(tr, l, TapPoint::FfnDownOut);
        let den = rows(tr, l, TapPoint::FfnNormOut);
        for t in 0..num.len() {
            let n: f64 = num[t].iter().map(|v| v * v).sum::<f64>().sqrt();
            let d: f64 = den[t].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(close(amp.values[l][t].unwrap(), n / d));
        }
    }
    let refs: Vec<&ActivationTrace> = traces.iter().collect();
    let sim = cross_similarity(&refs, TapPoint::BlockOutput, &[0, 3, 0]).unwrap();
    let a = rows(&traces[0], 4, TapPoint::BlockOutput)[0].clone();
    let b = rows(&traces[1], 1, TapPoint::BlockOutput)[3].clone();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(close(sim.pairs[0].matrix[4][1], dot / (na * nb)));
    assert_eq!(sim.pairs.len(), 3);
}

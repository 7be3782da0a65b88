// SPDX-License-Identifier: MIT OR Apache-2.0

//! The contract an external checkpoint exporter relies on: a hand-assembled
//! archive plus config JSON loads through `load_model` and behaves exactly
//! like the native archive.

use std::collections::BTreeMap;

use melab::detector::{detect_me_layer, DEFAULT_EXCLUDE_TAIL, DEFAULT_THRESHOLD};
use melab::diagnostics::norm_profile;
use melab::model::{load_model, ModelBundle, ModelConfig};
use melab::synth::{synth_config, synth_model, synth_tokens};
use melab::tensor::Tensor;
use melab::transformer::{forward, CaptureSpec, Intervention, TapPoint};

/// Writes the archive layout independently of the crate's writer: tensors
/// in reverse name order, an unpadded header, foreign metadata.
fn exporter_bytes(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut header = String::from("{\"__metadata__\":{\"format\":\"pt\",\"source\":\"hub\"}");
    let mut data = Vec::new();
    for (name, t) in tensors.iter().rev() {
        let start = data.len();
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            ",\"{name}\":{{\"dtype\":\"F32\",\"shape\":[{}],\"data_offsets\":[{start},{}]}}",
            shape.join(","),
            data.len()
        ));
    }
    header.push('}');
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&data);
    out
}

fn detection(m: &ModelBundle) -> Option<(usize, usize, u64)> {
    let toks = synth_tokens(m.config.vocab_size, 16, 21).unwrap();
    let tr = forward(m, &toks, &CaptureSpec::none(), &Intervention::None).unwrap();
    let p = norm_profile(&tr, TapPoint::BlockOutput).unwrap();
    detect_me_layer(&p, DEFAULT_THRESHOLD, DEFAULT_EXCLUDE_TAIL)
        .unwrap()
        .map(|d| (d.layer, d.token, d.jump_ratio.to_bits()))
}

#[test]
fn exported_archive_matches_native() {
    let cfg = synth_config(12);
    let native = synth_model(&cfg, 7, 300.0, 5.0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut tensors: Vec<(String, Tensor)> = native.to_tensors().into_iter().collect();
    // an untied head and a QK-norm weight the exporter may leave in
    tensors.push((
        "lm_head".into(),
        Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
    ));
    tensors.push(("layers.0.q_norm".into(), Tensor::zeros(&[cfg.d_head])));
    let archive = dir.path().join("exported.safetensors");
    std::fs::write(&archive, exporter_bytes(&tensors)).unwrap();

    let config_json = format!(
        r#"{{"vocab_size": 256, "norm_eps": 1e-6, "rope_theta": 10000.0, "rope_enabled": false,
            "d_ff": 128, "d_head": 16, "n_kv_heads": 2, "n_heads": 4, "d_model": 64,
            "n_layers": {}}}"#,
        cfg.n_layers
    );
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, config_json).unwrap();

    let loaded = load_model(ModelConfig::load(&config_path).unwrap(), &archive).unwrap();
    assert_eq!(loaded, native);
    assert_eq!(detection(&loaded), detection(&native));
    assert_eq!(detection(&loaded).unwrap().0, 7);
}

#[test]
fn widened_half_precision_values_survive_exactly() {
    // Every f16 and bf16 value is representable in f32; the exporter widens
    // them and the archive must keep the bits.
    let bf16: Vec<f32> = (0..=u16::MAX)
        .step_by(97)
        .map(|b| f32::from_bits(u32::from(b) << 16))
        .filter(|v| v.is_finite())
        .collect();
    let n = bf16.len();
    let t = Tensor::new(vec![n], bf16.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.safetensors");
    std::fs::write(&path, exporter_bytes(&[("w".into(), t)])).unwrap();
    let (manifest, map) = melab::archive::read_archive(&path).unwrap();
    assert_eq!(manifest.metadata.unwrap()["source"], "hub");
    let back = map["w"].data();
    assert!(back
        .iter()
        .zip(&bf16)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn missing_and_misshapen_tensors_are_named() {
    let cfg = synth_config(3);
    let m = synth_model(&cfg, 1, 300.0, 5.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.safetensors");

    let mut t: BTreeMap<String, Tensor> = m.to_tensors();
    t.remove("layers.2.W_up");
    std::fs::write(
        &path,
        exporter_bytes(&t.clone().into_iter().collect::<Vec<_>>()),
    )
    .unwrap();
    let err = load_model(cfg.clone(), &path).unwrap_err().to_string();
    assert!(err.contains("layers.2.W_up"), "{err}");

    t.insert(
        "layers.2.W_up".into(),
        Tensor::zeros(&[cfg.d_ff, cfg.d_model]),
    );
    std::fs::write(&path, exporter_bytes(&t.into_iter().collect::<Vec<_>>())).unwrap();
    let err = load_model(cfg, &path).unwrap_err().to_string();
    assert!(
        err.contains("layers.2.W_up") && err.contains("shape"),
        "{err}"
    );
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Black-box tests of the `melab` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn melab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let o = melab(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

/// Synthesises a 12-layer oracle with the given target into `dir/name`.
fn synth(dir: &Path, name: &str, target: usize, seed: u64) -> (String, String) {
    ok(
        dir,
        &[
            "synth",
            "--target",
            &target.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            name,
        ],
    );
    (
        format!("{name}/config.json"),
        format!("{name}/model.safetensors"),
    )
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn detect_reports_engineered_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 7, 3);
    let o = melab(
        tmp.path(),
        &["detect", "--config", &c, "--archive", &a, "--out", "d"],
    );
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"layer\": 7"), "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["detection"]["token"], 0);
    assert_eq!(v["detection"]["threshold_used"], 100.0);
    assert!(tmp.path().join("d/run.json").exists());
    assert!(tmp.path().join("d/norm_profile.csv").exists());
}

#[test]
fn zero_rate_compare_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 5, 1);
    let v = ok(
        tmp.path(),
        &[
            "mask",
            "--config",
            &c,
            "--archive",
            &a,
            "--rate",
            "0",
            "--compare",
            "--out",
            "o",
        ],
    );
    assert_eq!(v["compare"]["identical"], true);
    assert_eq!(v["compare"]["perturbation"], 0.0);
    let v = ok(
        tmp.path(),
        &[
            "mask",
            "--config",
            &c,
            "--archive",
            &a,
            "--rate",
            "0.5",
            "--compare",
            "--out",
            "o2",
        ],
    );
    assert_eq!(v["compare"]["identical"], false);
    assert_eq!(v["spec"]["layers"]["5"].as_array().unwrap().len(), 32);
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 7, 1);
    synth(tmp.path(), "b", 7, 1);
    synth(tmp.path(), "c", 7, 2);
    let read = |n: &str| std::fs::read(tmp.path().join(n).join("model.safetensors")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn rerun_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 4, 9);
    for cmd in ["sink", "metrics", "similarity", "trace"] {
        let first = format!("{cmd}1");
        let second = format!("{cmd}2");
        ok(
            tmp.path(),
            &[
                cmd,
                "--config",
                &c,
                "--archive",
                &a,
                "--seed",
                "11",
                "--out",
                &first,
            ],
        );
        let run = format!("{first}/run.json");
        ok(tmp.path(), &["rerun", &run, "--out", &second]);
        let mut x = files(&tmp.path().join(&first));
        let mut y = files(&tmp.path().join(&second));
        x.remove(Path::new("run.json"));
        let rec: Value = serde_json::from_slice(&y.remove(Path::new("run.json")).unwrap()).unwrap();
        assert_eq!(rec["command"], cmd);
        assert_eq!(rec["seed"], 11);
        assert!(!x.is_empty());
        assert_eq!(x, y, "{cmd} outputs differ after rerun");
    }
}

#[test]
fn mask_kinds_and_token_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 3, 2);
    for kind in ["weight", "random", "magnitude"] {
        for mode in ["massive", "all"] {
            let v = ok(
                tmp.path(),
                &[
                    "mask",
                    "--config",
                    &c,
                    "--archive",
                    &a,
                    "--mask-kind",
                    kind,
                    "--token-mode",
                    mode,
                    "--policy",
                    "me-only",
                    "--rate",
                    "0.25",
                    "--out",
                    "o",
                ],
            );
            let layers = v["spec"]["layers"].as_object().unwrap();
            assert_eq!(layers.len(), 1);
            assert_eq!(layers["3"].as_array().unwrap().len(), 16);
        }
    }
}

#[test]
fn ablation_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 6, 5);
    let v = ok(
        tmp.path(),
        &["ablate", "--config", &c, "--archive", &a, "--out", "o"],
    );
    assert_eq!(v["baseline"]["layer"], 6);
    assert!(v["ablated"].is_null());
    let v = ok(
        tmp.path(),
        &[
            "ablate",
            "--config",
            &c,
            "--archive",
            &a,
            "--kind",
            "ffn-norm",
            "--out",
            "o",
        ],
    );
    let base = v["baseline"]["jump_ratio"].as_f64().unwrap();
    let abl = v["ablated"]["jump_ratio"].as_f64().unwrap();
    assert!(base / abl >= 2.0);
}

#[test]
fn token_file_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 7, 0);
    std::fs::write(tmp.path().join("t.json"), "[0, 17, 4, 99, 3, 250, 8, 8]").unwrap();
    let v = ok(
        tmp.path(),
        &[
            "detect",
            "--config",
            &c,
            "--archive",
            &a,
            "--tokens",
            "t.json",
            "--out",
            "o",
        ],
    );
    assert_eq!(v["tokens"].as_array().unwrap().len(), 8);
    assert_eq!(v["detection"]["layer"], 7);

    std::fs::write(tmp.path().join("neg.json"), "[0, -1]").unwrap();
    let o = melab(
        tmp.path(),
        &[
            "detect",
            "--config",
            &c,
            "--archive",
            &a,
            "--tokens",
            "neg.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(tmp.path().join("big.json"), "[0, 256]").unwrap();
    let o = melab(
        tmp.path(),
        &[
            "detect",
            "--config",
            &c,
            "--archive",
            &a,
            "--tokens",
            "big.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(melab(p, &["--help"]).status.code(), Some(0));
    assert_eq!(melab(p, &["--version"]).status.code(), Some(0));
    let o = melab(p, &["detect", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(melab(p, &["detect"]).status.code(), Some(1));
    assert_eq!(
        melab(p, &["mask", "--policy", "sideways"]).status.code(),
        Some(1)
    );
    assert_eq!(
        melab(
            p,
            &["detect", "--config", "none.json", "--archive", "none.bin"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        melab(p, &["synth", "--target", "11"]).status.code(),
        Some(2)
    );
    let (c, a) = synth(p, "m", 7, 0);
    assert_eq!(
        melab(
            p,
            &["mask", "--config", &c, "--archive", &a, "--rate", "1.5"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        melab(
            p,
            &["mask", "--config", &c, "--archive", &a, "--me-layer", "12"]
        )
        .status
        .code(),
        Some(2)
    );
    std::fs::write(p.join("bad.json"), "{}").unwrap();
    assert_eq!(melab(p, &["rerun", "bad.json"]).status.code(), Some(2));
}

#[test]
fn csv_reports_are_rectangular_and_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let (c, a) = synth(tmp.path(), "m", 5, 4);
    ok(
        tmp.path(),
        &["metrics", "--config", &c, "--archive", &a, "--out", "o"],
    );
    ok(
        tmp.path(),
        &["sink", "--config", &c, "--archive", &a, "--out", "o"],
    );
    let mut seen = 0;
    for (name, bytes) in files(&tmp.path().join("o")) {
        if name.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        seen += 1;
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        let mut lines = text.lines();
        let width = lines.next().unwrap().split(',').count();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), width, "{}: {line}", name.display());
            for cell in cells.iter().filter(|c| !c.is_empty()) {
                let v: f64 = cell
                    .parse()
                    .unwrap_or_else(|_| panic!("{cell} in {}", name.display()));
                let digits = cell
                    .trim_start_matches('-')
                    .split('e')
                    .next()
                    .unwrap()
                    .replace('.', "");
                assert!(
                    digits.trim_start_matches('0').len() <= 6 || !v.is_finite(),
                    "{cell}"
                );
            }
        }
    }
    // metrics: 11 tables; sink: 2 tables plus 12 layers × 4 heads heatmaps
    assert_eq!(seen, 11 + 2 + 48);
}

#[test]
fn reference_table_lists_published_layers() {
    let tmp = tempfile::tempdir().unwrap();
    let v = ok(tmp.path(), &["reference-table", "--out", "o"]);
    assert_eq!(v["Qwen3-8B"], 7);
    assert_eq!(v.as_object().unwrap().len(), 10);
}

//! The `gpmech` binary: stage outputs, manifests and exit codes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use gpmech::attribution::read_scores;
use gpmech::run::{sha256_file, FaithfulnessOutput, Manifest};

fn gpmech(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpmech"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gpmech(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn data(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn behavioral_matches_the_golden_report_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["lm.sfct", "lm.json", "stimuli.tsv"] {
        std::fs::copy(data("toy").join(f), dir.path().join(f)).unwrap();
    }
    let cfg = data("tiny.toml");
    ok(dir.path(), &["--config", cfg.to_str().unwrap(), "behavioral"]);
    let got = std::fs::read(dir.path().join("behavior.tsv")).unwrap();
    let want = std::fs::read(data("toy/golden_behavior.tsv")).unwrap();
    assert_eq!(got, want);
    let m = Manifest::load(&dir.path().join("manifests/behavioral.json")).unwrap();
    assert_eq!(m.inputs["lm.sfct"], sha256_file(&dir.path().join("lm.sfct")).unwrap());
    assert_eq!(m.outputs["behavior.tsv"], sha256_file(&dir.path().join("behavior.tsv")).unwrap());
}

#[test]
fn missing_artifacts_exit_3_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = gpmech(dir.path(), &["attribute"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lm.sfct"), "{err}");
}

#[test]
fn config_errors_exit_2_and_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "typo = 1\n[model]\nd_model = 0\n[sae.train]\nlr = -1.0\n").unwrap();
    let out = gpmech(dir.path(), &["--config", cfg.to_str().unwrap(), "report"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["typo", "model.d_model", "sae.train.lr"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = data("tiny.toml");
    let c = cfg.to_str().unwrap();
    let stages = [
        "gen-grammar",
        "train-lm",
        "collect-acts",
        "train-sae",
        "behavioral",
        "attribute",
        "extract-circuit",
        "faithfulness",
        "intervene",
        "probe-train",
        "probe-eval",
        "probe-reading",
        "compare-circuits",
        "report",
    ];
    for s in stages {
        ok(root, &["--config", c, s]);
        let m = Manifest::load(&root.join("manifests").join(format!("{s}.json"))).unwrap();
        assert!(!m.outputs.is_empty(), "{s} recorded no outputs");
        for (rel, hash) in &m.outputs {
            assert_eq!(&sha256_file(&root.join(rel)).unwrap(), hash, "{s}: {rel}");
        }
    }

    // Keeping every feature reproduces the full model.
    let full = root.join("full.json");
    ok(root, &["--config", c, "extract-circuit", "--node-threshold", "0", "--edge-threshold", "0", "--out", full.to_str().unwrap()]);
    ok(root, &["--config", c, "faithfulness", "--circuit", full.to_str().unwrap()]);
    let f: FaithfulnessOutput =
        serde_json::from_str(&std::fs::read_to_string(root.join("faithfulness.json")).unwrap()).unwrap();
    assert!((f.report.faithfulness - 1.0).abs() < 1e-6, "{}", f.report.faithfulness);

    ok(root, &["--config", c, "compare-circuits", "--a", full.to_str().unwrap(), "--b", full.to_str().unwrap()]);
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("circuit_comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["iou"]["value"], 1.0);

    // On a metric linear in the features, the gradient estimate is exact.
    let by_coord = |method: &str| {
        ok(root, &["--config", c, "attribute", "--method", method, "--metric", "linear-test"]);
        read_scores(&root.join("scores.tsv"))
            .unwrap()
            .into_iter()
            .map(|s| (s.coord, s.score))
            .collect::<BTreeMap<_, _>>()
    };
    let exact = by_coord("exact");
    let atp = by_coord("atp");
    assert_eq!(exact.len(), atp.len());
    for (k, v) in &exact {
        assert!((atp[k] - v).abs() < 1e-10, "{k:?}: {} vs {v}", atp[k]);
    }
}

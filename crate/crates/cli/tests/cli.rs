// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn icr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = icr(args);
    assert!(out.status.success(), "icr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, layers: &str, seed: &str) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--examples",
        n,
        "--layers",
        layers,
        "--tokens",
        "10",
        "--heads",
        "2",
        "--seed",
        seed,
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn compute_writes_one_column_per_layer() {
    let t = tempfile::tempdir().unwrap();
    let dumps = t.path().join("d");
    synth(&dumps, "24", "7", "1");
    ok(&["validate", "--dumps", p(&dumps)]);
    let f = t.path().join("f.csv");
    ok(&["compute", "--dumps", p(&dumps), "--out", p(&f), "--k", "20"]);
    let text = fs::read_to_string(&f).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
    assert_eq!(lines.count(), 24);
    let labels = fs::read_to_string(t.path().join("f.labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 25);
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let dumps = t.path().join("d");
    synth(&dumps, "40", "5", "2");
    let f = t.path().join("f.csv");
    ok(&["compute", "--dumps", p(&dumps), "--out", p(&f)]);
    let l = t.path().join("f.labels.csv");
    for run in ["a", "b"] {
        ok(&[
            "train",
            "--features",
            p(&f),
            "--labels",
            p(&l),
            "--seed",
            "7",
            "--runs",
            "2",
            "--out",
            p(&t.path().join(run)),
        ]);
    }
    let a = dir_bytes(&t.path().join("a"));
    assert_eq!(a, dir_bytes(&t.path().join("b")));
    assert!(a.iter().any(|(n, _)| n == "probe_run0.icrp"));
    assert!(a.iter().any(|(n, _)| n == "probe_run1.icrp"));
}

#[test]
fn usage_errors_exit_2_and_domain_errors_exit_1() {
    let out = icr(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(icr(&[]).status.code(), Some(2));
    assert_eq!(icr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(icr(&["compute", "--dumps", "d", "--out", "f.csv", "--setting", "half"]).status.code(), Some(2));

    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nothing");
    let out = icr(&["compute", "--dumps", p(&missing), "--out", p(&t.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dumps = t.path().join("d");
    synth(&dumps, "4", "2", "3");
    fs::write(dumps.join("broken.icrd"), b"ICRD junk").unwrap();
    assert_eq!(icr(&["validate", "--dumps", p(&dumps)]).status.code(), Some(1));
}

/// synth -> compute -> train -> eval (plus the analysis commands) twice with
/// the same seeds; every emitted byte must match and no input may change.
#[test]
fn full_pipeline_is_deterministic_and_leaves_inputs_alone() {
    let t = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let root = t.path().join(tag);
        let dumps = root.join("dumps");
        synth(&dumps, "60", "6", "11");
        let other = root.join("other");
        ok(&[
            "synth",
            "--out",
            p(&other),
            "--examples",
            "40",
            "--layers",
            "6",
            "--tokens",
            "10",
            "--seed",
            "12",
            "--dataset",
            "other",
        ]);
        let f = root.join("f.csv");
        let g = root.join("g.csv");
        ok(&["compute", "--dumps", p(&dumps), "--out", p(&f)]);
        ok(&["compute", "--dumps", p(&other), "--out", p(&g)]);
        let l = root.join("f.labels.csv");
        let before = dir_bytes(&dumps);
        let feats_before = fs::read(&f).unwrap();

        let out = |name: &str| root.join("out").join(name);
        ok(&["train", "--features", p(&f), "--labels", p(&l), "--runs", "2", "--seed", "5", "--out", p(&out("train"))]);
        ok(&["eval", "--features", p(&f), "--labels", p(&l), "--runs", "2", "--seed", "5", "--out", p(&out("eval"))]);
        ok(&["layerwise", "--features", p(&f), "--labels", p(&l), "--out", p(&out("layerwise"))]);
        ok(&[
            "ablate-layers",
            "--features",
            p(&f),
            "--labels",
            p(&l),
            "--runs",
            "1",
            "--out",
            p(&out("ablate-layers")),
        ]);
        ok(&["ablate-components", "--dumps", p(&dumps), "--runs", "1", "--out", p(&out("ablate-components"))]);
        let spec_a = format!("synth={}:{}", p(&f), p(&l));
        let spec_b = format!("other={}:{}", p(&g), p(&root.join("g.labels.csv")));
        ok(&["gen-matrix", "--dataset", &spec_a, "--dataset", &spec_b, "--runs", "1", "--out", p(&out("gen-matrix"))]);
        let ckpt = out("train").join("probe_run0.icrp");
        ok(&["token-detect", "--dumps", p(&dumps), "--checkpoint", p(&ckpt), "--out", p(&out("token-detect"))]);
        ok(&["baselines", "--dumps", p(&dumps), "--out", p(&out("baselines")), "--format", "json"]);

        assert_eq!(before, dir_bytes(&dumps));
        assert_eq!(feats_before, fs::read(&f).unwrap());
        ["train", "eval", "layerwise", "ablate-layers", "ablate-components", "gen-matrix", "token-detect", "baselines"]
            .iter()
            .map(|c| (c.to_string(), dir_bytes(&out(c))))
            .collect::<Vec<_>>()
    };
    let first = run("one");
    let second = run("two");
    assert_eq!(first, second);

    let names = |cmd: &str| -> Vec<String> {
        first.iter().find(|(c, _)| c == cmd).unwrap().1.iter().map(|(n, _)| n.clone()).collect()
    };
    assert_eq!(names("eval"), ["eval.csv", "layer_auroc.csv", "report.json"]);
    assert_eq!(names("baselines"), ["report.json"]);
    assert_eq!(names("gen-matrix"), ["generalization.csv", "report.json", "summary.csv"]);

    let report: serde_json::Value = serde_json::from_slice(
        &first
            .iter()
            .find(|(c, _)| c == "ablate-components")
            .unwrap()
            .1
            .iter()
            .find(|(n, _)| n == "report.json")
            .unwrap()
            .1,
    )
    .unwrap();
    assert_eq!(report["run_id"], "ablate-components-seed0");
    assert_eq!(report["tables"]["components"]["rows"], serde_json::json!(["NONE", "HS_ONLY", "FULL"]));
}

use std::process::{Command, Output};

use serde_json::Value;

fn authguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_authguard")).args(args).output().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = authguard(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "datagen", "train-encoder", "train-reasoner", "eval", "generate", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(authguard(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(authguard(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(authguard(&["synth", "--n", "8", "--side", "16", "--out", corpus.to_str().unwrap()])
        .status
        .success());
    let out = authguard(&[
        "train-encoder",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
        "--train.no_such_field=3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn runtime_failures_exit_one() {
    assert_eq!(authguard(&["eval", "--pred", "/definitely/not/here.jsonl"]).status.code(), Some(1));
}

#[test]
fn synth_and_datagen_write_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let data = dir.path().join("data");
    assert!(authguard(&[
        "synth",
        "--seed",
        "4",
        "--n",
        "12",
        "--side",
        "32",
        "--out",
        corpus.to_str().unwrap()
    ])
    .status
    .success());
    assert!(authguard(&[
        "datagen",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--stub"
    ])
    .status
    .success());
    let m: Value = serde_json::from_str(&std::fs::read_to_string(corpus.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 4);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 3);
    let captions = std::fs::read_to_string(data.join("captions.jsonl")).unwrap();
    assert_eq!(captions.lines().count(), 12);
}

#[test]
fn eval_from_prediction_file() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(
        &pred,
        concat!(
            "{\"image_id\":\"a\",\"score\":0.8,\"label\":1}\n",
            "{\"image_id\":\"b\",\"score\":0.6,\"label\":0}\n",
            "{\"image_id\":\"c\",\"score\":0.4,\"label\":1}\n",
            "{\"image_id\":\"d\",\"score\":0.2,\"label\":0}\n",
        ),
    )
    .unwrap();
    let out = authguard(&["eval", "--pred", pred.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["auc"], 0.75);
    assert_eq!(report["accuracy"], 0.5);
    assert_eq!(report["n"], 4);
}

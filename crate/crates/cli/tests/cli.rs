//! Command-line behavior through the built binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[model]
future_frames = 6

[model.encoder]
hidden_dim = 8
polyline_layers = [8]

[model.decoder]
num_modes = 4
map_collect = 4

[model.vectorize]
max_map_polylines = 8
points_per_polyline = 4

[data]
train_scenes = 12
eval_scenes = 25

[data.generator]
history_frames = 5
future_frames = 6
num_focal = 2

[train]
epochs = 1
batch_size = 4
decay_start = 1
"#;

fn mtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtr"))
        .args(args)
        .env("MTR_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = mtr(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(mtr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for f in [&a, &b] {
        let out = mtr(&["gen-data", "--seed", "7", "--scenes", "5", "--out", p(f)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    assert!(ta.starts_with(b"{\"header\":"));
    assert_eq!(ta.iter().filter(|&&c| c == b'\n').count(), 6);
}

#[test]
fn bad_config_lists_every_problem_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model.encoder]\nnum_heads = 3\n[model.decoder]\nnum_modes = 0\n").unwrap();
    let out = mtr(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(lines.len(), 2, "{err}");
    assert!(err.contains("\"path\":\"model.decoder.num_modes\""));
    assert!(err.contains("\"path\":\"model.encoder.num_heads\"") || err.contains("hidden_dim"));
}

#[test]
fn missing_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtr(&[
        "predict",
        "--ckpt",
        p(&dir.path().join("none.json")),
        "--data",
        p(&dir.path().join("none.jsonl")),
        "--out",
        p(&dir.path().join("pred.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_file"));
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    std::fs::write(d("tiny.toml"), TINY).unwrap();
    let cfg = d("tiny.toml");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--config".into(), p(&cfg).into(), "--out".into(), p(&d("train.jsonl")).into()],
        vec![
            "gen-data".into(),
            "--config".into(),
            p(&cfg).into(),
            "--seed".into(),
            "99".into(),
            "--scenes".into(),
            "25".into(),
            "--out".into(),
            p(&d("eval.jsonl")).into(),
        ],
        vec![
            "train".into(),
            "--config".into(),
            p(&cfg).into(),
            "--data".into(),
            p(&d("train.jsonl")).into(),
            "--out".into(),
            p(&d("ckpt.json")).into(),
        ],
        vec![
            "predict".into(),
            "--ckpt".into(),
            p(&d("ckpt.json")).into(),
            "--data".into(),
            p(&d("eval.jsonl")).into(),
            "--out".into(),
            p(&d("pred.jsonl")).into(),
        ],
        vec![
            "eval".into(),
            "--predictions".into(),
            p(&d("pred.jsonl")).into(),
            "--data".into(),
            p(&d("eval.jsonl")).into(),
            "--config".into(),
            p(&cfg).into(),
            "--out".into(),
            p(&d("metrics.json")).into(),
        ],
        vec![
            "eval".into(),
            "--ckpt".into(),
            p(&d("ckpt.json")).into(),
            "--data".into(),
            p(&d("eval.jsonl")).into(),
            "--out".into(),
            p(&d("metrics_direct.json")).into(),
        ],
    ];
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        let out = mtr(&args);
        assert_eq!(out.status.code(), Some(0), "{s:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let log = std::fs::read_to_string(d("ckpt.json.log.csv")).unwrap();
    assert!(log.contains("epoch,l_sum,l_gmm,classification,l_dmp,lr"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("metrics.json")).unwrap()).unwrap();
    let direct: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d("metrics_direct.json")).unwrap()).unwrap();
    assert_eq!(m["report"], direct["report"]);
    assert_eq!(m["report"]["samples"], 50);
    assert_eq!(m["header"]["seed"], 4);
    assert_eq!(m["header"]["config_hash"].as_str().unwrap().len(), 16);
    let csv = std::fs::read_to_string(d("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("all,50,")));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgd"))
        .args(args)
        .env_remove("LGD_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("small-{seed}.bundle"));
    let seed = seed.to_string();
    json(&lgd(&[
        "synth", "--factors", "2", "--p", "0.08", "--nodes", "120", "--classes", "4", "--seed", &seed, "-o",
        s(&path),
    ]));
    path
}

const SMALL_LGD: [&str; 14] = [
    "--M", "2", "--T", "2", "--layers", "2", "--d-out", "8", "--k", "3", "--epochs", "8", "--patience", "8",
];

fn train_small(dir: &Path, data: &Path, extra: &[&str]) -> (PathBuf, Value) {
    let out = dir.join("run");
    let mut args = vec!["train", "--data", s(data), "--out", s(&out)];
    args.extend(SMALL_LGD);
    args.extend(extra);
    let report = json(&lgd(&args));
    (out, report)
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_synth(dir.path(), 4);
    let bytes_a = std::fs::read(&a).unwrap();
    std::fs::rename(&a, dir.path().join("first.bundle")).unwrap();
    let b = small_synth(dir.path(), 4);
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    let c = small_synth(dir.path(), 5);
    assert_ne!(bytes_a, std::fs::read(&c).unwrap());
}

#[test]
fn synth_report_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bundle");
    let r = json(&lgd(&["synth", "--factors", "4", "--nodes", "200", "--seed", "1", "-o", s(&path)]));
    assert_eq!(r["factors"], 4);
    assert_eq!(r["nodes"], 200);
    assert_eq!(r["p"], 0.164);
    assert_eq!(r["q"], 3e-5);
    let edges = r["edges"].as_f64().unwrap();
    assert!((r["average_degree"].as_f64().unwrap() - 2.0 * edges / 200.0).abs() < 1e-9);
}

#[test]
fn synth_without_probability_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgd(&["synth", "--factors", "3", "-o", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn unknown_flags_and_bad_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lgd(&["train", "--bogus"]).status.code(), Some(2));
    let missing = dir.path().join("missing.bundle");
    assert_eq!(lgd(&["train", "--data", s(&missing)]).status.code(), Some(2));
    let data = small_synth(dir.path(), 1);
    let out = lgd(&["train", "--data", s(&data), "--dropout", "1.5", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = lgd(&["train", "--data", s(&data), "--M", "3", "--d-out", "8", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverged_run_exits_with_three_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 1);
    let out_dir = dir.path().join("boom");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out_dir), "--lr", "1e300"];
    args.extend(SMALL_LGD);
    let out = lgd(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["status"], "diverged");
    for f in ["manifest.json", "history.csv", "model.ckpt", "metrics.json"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 2);
    let (out, r) = train_small(dir.path(), &data, &["--seed", "9"]);
    for key in [
        "schema",
        "model",
        "dataset",
        "seed",
        "status",
        "epochs_run",
        "best_epoch",
        "val_metric",
        "val_accuracy",
        "val_micro_f1",
        "val_macro_f1",
        "test_accuracy",
        "test_micro_f1",
        "test_macro_f1",
    ] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["model"], "lgd");
    assert_eq!(r["seed"], 9);
    // the synthetic data are multi-label, so micro-F1 is the selection metric
    assert_eq!(r["val_metric"], r["val_micro_f1"]);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["model"]["kind"], "lgd");
    assert_eq!(manifest["model"]["config"]["channels"], 2);
    assert!(manifest["dataset"]["content_hash"].as_str().unwrap().starts_with("sha256:"));
    assert!(manifest["dataset"]["multi_label"].as_bool().unwrap());

    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + r["epochs_run"].as_u64().unwrap() as usize);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(saved, r);

    let ckpt = out.join("model.ckpt");
    let e = json(&lgd(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test"]));
    assert_eq!(e["micro_f1"], r["test_micro_f1"]);
    assert_eq!(e["macro_f1"], r["test_macro_f1"]);
    assert_eq!(e["accuracy"], r["test_accuracy"]);
}

#[test]
fn seed_environment_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 3);
    let mut args = vec!["train", "--data", s(&data), "--seed", "1"];
    let out_dir = dir.path().join("env");
    args.extend(["--out", s(&out_dir)]);
    args.extend(SMALL_LGD);
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_lgd")).args(&args).env("LGD_SEED", seed).output().unwrap();
        json(&out)
    };
    let a = run("17");
    assert_eq!(a["seed"], 17);
    let b = run("17");
    assert_eq!(a, b);
    let out = Command::new(env!("CARGO_BIN_EXE_lgd")).args(&args).env("LGD_SEED", "x").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gcn_runs_and_rejects_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 2);
    let out = dir.path().join("gcn");
    let r = json(&lgd(&[
        "train", "--data", s(&data), "--model", "gcn", "--hidden", "16", "--epochs", "10", "--patience", "10",
        "--out", s(&out),
    ]));
    assert_eq!(r["model"], "gcn");
    let ckpt = out.join("model.ckpt");
    let tsv = dir.path().join("e.tsv");
    let o = lgd(&["export", "--checkpoint", s(&ckpt), "--data", s(&data), "-o", s(&tsv)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_writes_one_row_per_node_and_channel() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 2);
    let (out, _) = train_small(dir.path(), &data, &[]);
    let ckpt = out.join("model.ckpt");
    for stage in ["post_routing", "post_aggregation"] {
        let tsv = dir.path().join(format!("{stage}.tsv"));
        let r = json(&lgd(&[
            "export", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "1", "--stage", stage, "-o", s(&tsv),
        ]));
        assert_eq!(r["rows"], 240);
        let text = std::fs::read_to_string(&tsv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "node\tchannel\tf1\tf2\tf3\tf4");
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split('\t').skip(2).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 240);
        if stage == "post_routing" {
            for row in &rows {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
        let nodes = std::fs::read_to_string(dir.path().join(format!("{stage}.nodes.tsv"))).unwrap();
        assert_eq!(nodes.lines().count(), 121);
        assert!(nodes.starts_with("node\tlabel\tf1\t"));
    }
    let bad = lgd(&["export", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "3", "-o", s(&dir.path().join("x.tsv"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn correlate_writes_symmetric_unit_diagonal_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), 2);
    let (out, _) = train_small(dir.path(), &data, &[]);
    let csv = dir.path().join("corr.csv");
    let r = json(&lgd(&[
        "correlate", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&data), "--split", "all", "-o", s(&csv),
    ]));
    assert_eq!(r["features"], 8);
    assert_eq!(r["nodes"], 120);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 8);
    let m: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(m.len(), 8);
    for i in 0..8 {
        assert!(m[i][i] == 0.0 || (m[i][i] - 1.0).abs() < 1e-12, "diagonal {}", m[i][i]);
        for j in 0..8 {
            assert!((m[i][j] - m[j][i]).abs() < 1e-12);
            assert!(m[i][j].abs() <= 1.0 + 1e-12);
        }
    }
}

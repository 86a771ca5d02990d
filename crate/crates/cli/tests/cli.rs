use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fedgrid");

fn case_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases/ieee14.case")
}

/// Fresh workspace holding the 14-bus case.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cases")).unwrap();
    std::fs::copy(case_file(), dir.path().join("cases/ieee14.case")).unwrap();
    dir
}

fn fedgrid(ws: &Path, args: &[&str]) -> Output {
    Command::new(BIN).env("FEDGRID_WORKSPACE", ws).args(args).output().unwrap()
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = fedgrid(ws, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Writes the desk profile and shrinks it with `edit`.
fn config(ws: &Path, name: &str, edit: impl FnOnce(&mut Value)) {
    ok(ws, &["write-config", name]);
    let path = ws.join(name);
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    edit(&mut c);
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
}

fn tiny(c: &mut Value) {
    c["sizes"] = serde_json::json!({ "train_per_class": 40, "test_per_class": 20 });
    c["clients"] = serde_json::json!([{ "bus": 2, "branch": [2, 3] }, { "bus": 3, "branch": [3, 4] }]);
    c["rounds"] = 1.into();
    c["model"]["d_model"] = 8.into();
    c["model"]["num_heads"] = 2.into();
    c["model"]["num_blocks"] = 1.into();
    c["model"]["ff_hidden"] = 8.into();
    c["model"]["head_hidden"] = 4.into();
    c["train"]["epochs"] = 1.into();
    c["prime_bits"] = 64.into();
}

fn run_pipeline(ws: &Path) {
    let c = ["--config", "tiny.json"];
    for cmd in [&["keygen"][..], &["generate-data"], &["train-local"], &["train-federated"], &["noise-sweep"], &["report"]] {
        ok(ws, &[&c[..], cmd].concat());
    }
}

#[test]
fn full_pipeline_writes_every_artifact_and_is_reproducible() {
    let (a, b) = (workspace(), workspace());
    for ws in [a.path(), b.path()] {
        config(ws, "tiny.json", tiny);
        run_pipeline(ws);
    }
    let out = a.path().join("out");
    for f in [
        "keys/public.json",
        "keys/private.json",
        "data/client0_train.csv",
        "data/client1_test.meta.json",
        "checkpoints/local_client0.json",
        "checkpoints/federated_client1.json",
        "logs/local.jsonl",
        "logs/federated.jsonl",
        "reports/noise_federated.json",
        "reports/report.json",
        "reports/report.csv",
        "reports/accuracy_vs_round.csv",
        "reports/accuracy_vs_noise.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for f in ["reports/report.json", "reports/report.csv", "data/client1_train.csv", "keys/public.json"] {
        let x = std::fs::read(out.join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }

    // One log record per (round, client).
    let logs = std::fs::read_to_string(out.join("logs/federated.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 2);

    // Four noise levels, one row per client each; identities hold on every row.
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("reports/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["dataset_digests"].as_array().unwrap().len(), 4);
    let rows = report["rows"].as_array().unwrap();
    let noisy = rows.iter().filter(|r| r["noise_level"].as_f64().unwrap() > 0.0).count();
    assert_eq!(noisy, 8);
    for r in rows {
        let m = &r["metrics"];
        let c = &m["counts"];
        let (tp, fp, tn, fn_) = (c["tp"].as_u64().unwrap(), c["fp"].as_u64().unwrap(), c["tn"].as_u64().unwrap(), c["fn"].as_u64().unwrap());
        assert_eq!(tp + fp + tn + fn_, 40);
        assert_eq!(m["accuracy"].as_f64().unwrap(), (tp + tn) as f64 / 40.0);
        if tp + fp > 0 {
            assert_eq!(m["precision"].as_f64().unwrap(), tp as f64 / (tp + fp) as f64);
        } else {
            assert!(m["precision"].is_null());
        }
    }
    let curve = std::fs::read_to_string(out.join("reports/accuracy_vs_noise.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("noise_level,client_id,bus,accuracy"));
    assert_eq!(curve.lines().count(), 9);
}

#[test]
fn untrained_model_is_at_chance() {
    let ws = workspace();
    config(ws.path(), "c.json", |c| {
        tiny(c);
        c["sizes"]["test_per_class"] = 200.into();
    });
    ok(ws.path(), &["--config", "c.json", "generate-data"]);
    ok(ws.path(), &["--config", "c.json", "evaluate", "--model", "initial"]);
    let text = std::fs::read_to_string(ws.path().join("out/reports/evaluate_initial.json")).unwrap();
    let report: Value = serde_json::from_str(&text).unwrap();
    for r in report["rows"].as_array().unwrap() {
        let acc = r["metrics"]["accuracy"].as_f64().unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }
}

#[test]
fn full_profile_gives_full_row_counts() {
    let ws = workspace();
    // The --full profile only changes sizes, epochs and key size.
    let full = fedgrid(ws.path(), &["--full", "write-config", "profile.json"]);
    assert!(full.status.success());
    let profile: Value = serde_json::from_str(&std::fs::read_to_string(ws.path().join("profile.json")).unwrap()).unwrap();
    assert_eq!(profile["sizes"], serde_json::json!({ "train_per_class": 10000, "test_per_class": 1000 }));
    config(ws.path(), "full.json", |c| {
        c["sizes"] = profile["sizes"].clone();
        c["clients"] = serde_json::json!([{ "bus": 2, "branch": [2, 3] }, { "bus": 3, "branch": [3, 4] }]);
    });
    ok(ws.path(), &["--config", "full.json", "generate-data"]);
    for t in 0..2 {
        let rows = |split: &str| {
            let text = std::fs::read_to_string(ws.path().join(format!("out/data/client{t}_{split}.csv"))).unwrap();
            text.lines().count() - 1
        };
        assert_eq!(rows("train"), 20_000);
        assert_eq!(rows("test"), 2_000);
    }
}

fn expect_failure(ws: &Path, args: &[&str], code: i32, stage: &str) {
    let out = fedgrid(ws, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(stderr.contains(&format!("{stage} failed")), "{stderr}");
}

#[test]
fn exit_codes_name_the_failing_stage() {
    let ws = workspace();
    let p = ws.path();
    expect_failure(p, &["--config", "absent.json", "keygen"], 2, "config");

    config(p, "noisy.json", |c| c["noise_levels"] = serde_json::json!([0.5]));
    expect_failure(p, &["--config", "noisy.json", "keygen"], 2, "config");

    config(p, "t.json", tiny);
    expect_failure(p, &["--config", "t.json", "train-local"], 3, "keys");
    ok(p, &["--config", "t.json", "keygen"]);
    expect_failure(p, &["--config", "t.json", "train-local"], 3, "load data");
    ok(p, &["--config", "t.json", "generate-data"]);
    expect_failure(p, &["--config", "t.json", "evaluate", "--model", "local"], 3, "evaluate");
    expect_failure(p, &["--config", "t.json", "report"], 3, "report");

    // A divergent optimizer is a numeric failure.
    config(p, "diverge.json", |c| {
        tiny(c);
        c["train"]["learning_rate"] = 1e300.into();
    });
    expect_failure(p, &["--config", "diverge.json", "train-local"], 4, "train-local");

    // Edited data no longer matches its sidecar digest.
    let csv = p.join("out/data/client0_test.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(lines.len() - 1);
    std::fs::write(&csv, lines.join("\n") + "\n").unwrap();
    expect_failure(p, &["--config", "t.json", "train-local"], 3, "load data");
}

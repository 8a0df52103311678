use std::path::Path;
use std::process::{Command, Output};

use hkfr::stub::{StubReply, StubServer};

fn hkfr(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hkfr"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = hkfr(work, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["synth", "--users", "100", "--seed", "7"];
    let first: serde_json::Value = serde_json::from_str(&ok(a.path(), &args)).unwrap();
    let second: serde_json::Value = serde_json::from_str(&ok(b.path(), &args)).unwrap();
    assert_eq!(first, second);
    assert_eq!(first["users"], 100);
    for f in [
        "synth/events.jsonl",
        "synth/labels.jsonl",
        "synth/profiles.jsonl",
        "synth/catalog.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hkfr(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        hkfr(dir.path(), &["synth", "--users", "many"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(hkfr(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "concurrency = 0\n").unwrap();
    let out = hkfr(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("concurrency"));
}

#[test]
fn eval_with_unlabeled_predictions_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.jsonl");
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(
        &labels,
        r#"{"user_id":"u1","task_id":"t","label_kind":"category","label_value":"Sichuan","cutoff_timestamp":1}
"#,
    )
    .unwrap();
    std::fs::write(
        &preds,
        r#"{"user_id":"u1","task_id":"t","items":["Sichuan"],"raw_output":"1. Sichuan","parse_status":"parsed"}
{"user_id":"u2","task_id":"t","items":["BBQ"],"raw_output":"1. BBQ","parse_status":"parsed"}
"#,
    )
    .unwrap();
    let out = hkfr(
        dir.path(),
        &[
            "eval",
            "--labels",
            labels.to_str().unwrap(),
            "--predictions",
            &format!("full={}", preds.display()),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("u2/t"));
}

#[test]
fn rejected_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--users", "3"]);
    ok(dir.path(), &["ingest"]);
    let stub = StubServer::scripted(vec![StubReply::status(401, "{\"error\":\"bad key\"}")]);
    let out = Command::new(env!("CARGO_BIN_EXE_hkfr"))
        .arg("--work-dir")
        .arg(dir.path())
        .args(["--backend", "http", "--endpoint", &stub.endpoint(), "fuse"])
        .env("HKFR_API_KEY", "wrong")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn mock_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &["synth", "--users", "100", "--noise", "0"]);
    let ingest: serde_json::Value = serde_json::from_str(&ok(w, &["ingest"])).unwrap();
    assert_eq!(ingest["rejected"], 0);
    // re-ingesting is a no-op
    let again: serde_json::Value = serde_json::from_str(&ok(w, &["ingest"])).unwrap();
    assert_eq!(again["accepted"], 0);
    assert_eq!(again["duplicates"], ingest["accepted"]);

    let fused: serde_json::Value = serde_json::from_str(&ok(w, &["fuse"])).unwrap();
    assert_eq!(fused["documents"], 100);
    let knowledge = std::fs::read(w.join("knowledge.jsonl")).unwrap();
    ok(w, &["fuse"]);
    assert_eq!(std::fs::read(w.join("knowledge.jsonl")).unwrap(), knowledge);

    let thin: serde_json::Value =
        serde_json::from_str(&ok(w, &["build-dataset", "--per-user", "2"])).unwrap();
    let ds: serde_json::Value = serde_json::from_str(&ok(w, &["build-dataset"])).unwrap();
    assert!(thin["export"]["train_count"].as_u64() <= Some(2 * 100));
    assert!(thin["export"]["train_count"].as_u64() < ds["export"]["train_count"].as_u64());
    assert_eq!(thin["export"]["test_count"], ds["export"]["test_count"]);
    let test_count = ds["export"]["test_count"].as_u64().unwrap();
    assert!(test_count > 0);
    let inf: serde_json::Value = serde_json::from_str(&ok(w, &["infer"])).unwrap();
    assert_eq!(inf["predictions"].as_u64().unwrap(), test_count);
    let table = ok(w, &["eval"]);
    assert!(table.contains("HR@5") && table.lines().any(|l| l.starts_with("full")));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.join("report/report.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    let category = rows.iter().find(|r| r["group"] == "category").unwrap();
    // noise-free users: the planted top category is always first
    assert_eq!(category["hr_at"]["5"], 1.0);
    assert_eq!(category["ndcg_at"]["5"], 1.0);
    for r in rows {
        for m in ["hr_at", "ndcg_at"] {
            for v in r[m].as_object().unwrap().values() {
                assert!((0.0..=1.0).contains(&v.as_f64().unwrap()));
            }
        }
        assert!(r["n_cases"].as_u64() >= r["n_parse_failures"].as_u64());
    }

    let features = std::fs::read_to_string(w.join("features/full.csv")).unwrap();
    assert_eq!(features.lines().count(), 101);
    assert!(features.starts_with("user_id,"));
}

#[test]
fn ablate_reports_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(w, &["synth", "--users", "60", "--noise", "0.3"]);
    ok(w, &["ingest"]);
    ok(w, &["fuse"]);
    let cfg = w.join("run.toml");
    std::fs::write(
        &cfg,
        "[base_backend]\nkind = \"mock\"\nmodel_name = \"base\"\n",
    )
    .unwrap();
    let table = ok(w, &["--config", cfg.to_str().unwrap(), "ablate"]);
    for run in ["full", "no_hkf", "no_it"] {
        assert!(
            table
                .lines()
                .any(|l| l.split_whitespace().next() == Some(run)),
            "{table}"
        );
    }
    assert!(w.join("report/ablation.json").exists());
}

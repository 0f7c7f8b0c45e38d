//! Exit codes and outputs of the command line.

use std::path::Path;
use std::process::Command;

fn roundkv(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_roundkv"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn verify_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", "{}");
    let (code, stdout, _) = roundkv(&["verify", "--config", &cfg]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("0 failed"));
}

#[test]
fn missing_config_exits_2() {
    let (code, _, stderr) = roundkv(&[
        "simulate",
        "--config",
        "/nonexistent/c.json",
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("cannot read config"));
}

#[test]
fn bad_keys_exit_2_and_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        (r#"{"workload": {"num_agnts": 3}}"#, "num_agnts"),
        (
            r#"{"pic": {"recompute_fraction": -1}}"#,
            "pic.recompute_fraction",
        ),
        (r#"{"model": {"num_layers": "four"}}"#, "model.num_layers"),
    ] {
        let cfg = write(dir.path(), "c.json", text);
        let (code, _, stderr) = roundkv(&["verify", "--config", &cfg]);
        assert_eq!(code, 2, "{text}");
        assert!(stderr.contains(key), "{stderr}");
    }
}

#[test]
fn simulate_single_agent_rows_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"workload": {"num_agents": 1, "num_rounds": 2}}"#,
    );
    let out = dir.path().join("r.json");
    let (code, _, stderr) =
        roundkv(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let ledger = |path: &str, round: u64| {
        rows.iter()
            .find(|r| r["path"] == path && r["round_id"] == round)
            .unwrap()["ledger"]
            .clone()
    };
    for r in 0..2 {
        assert_eq!(ledger("T2", r), ledger("T3", r));
    }
    assert!(report["summary"]["T3"].is_object());
}

#[test]
fn bench_reports_timing_and_counters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"workload": {"num_agents": 2, "num_rounds": 1}, "harness": {"bench_iterations": 2}}"#,
    );
    let (code, stdout, _) = roundkv(&["bench", "--config", &cfg]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["iterations"], 2);
    assert!(v["mean_seconds"]["T3"].as_f64().unwrap() >= 0.0);
    assert!(v["ledgers"]["T2"]["rope_calls_per_layer"].is_array());
}

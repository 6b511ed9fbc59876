use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use datamarket::trace::{EventType, TradeTrace};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_datamarket"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_trace(dir: &Path) -> TradeTrace {
    let f = std::fs::File::open(dir.join("trace.jsonl")).unwrap();
    TradeTrace::read_jsonl(std::io::BufReader::new(f)).unwrap()
}

#[test]
fn demo_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["run", "--config", scenario("demo.json").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.jsonl", "cost_report.json", "reputation.json", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["settled"], 2);
    let cost: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("cost_report.json")).unwrap()).unwrap();
    assert_eq!(cost["trades"].as_array().unwrap().len(), 2);
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("reputation.json")).unwrap()).unwrap();
    assert!(rep.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn report_reads_a_written_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run(&["run", "--config", scenario("demo.json").to_str().unwrap(), "--out", out]);
    let trace = dir.path().join("trace.jsonl");
    let o = run(&["report", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("settled 2"), "{text}");
}

#[test]
fn replay_scenario_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["run", "--config", scenario("replay_attack.json").to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    let t = read_trace(dir.path());
    assert!(t
        .events_of(EventType::OrderRejected)
        .any(|e| e.detail.as_deref() == Some("DuplicateOrder")));
    assert!(t
        .events_of(EventType::AgentError)
        .any(|e| e.detail.as_deref() == Some("NonceMismatch")));
}

#[test]
fn negative_price_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"prices": {"temperature": -5}}"#).unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for body in [r#"{"max_epochs": 0}"#, r#"{"buckets": [8]}"#, r#"{"unknown_field": 1}"#, "not json"] {
        let cfg = dir.path().join("bad.json");
        std::fs::write(&cfg, body).unwrap();
        let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
}

#[test]
fn missing_config_file_exits_1() {
    let o = run(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_attack_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let demo = scenario("demo.json");
    let o = run(&["attack", "--attack", "volume", "--config", demo.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--config", demo.to_str().unwrap(), "--attack", "volume", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["attack", "--attack", "timing"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn single_run_attack_carries_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "run", "--config", scenario("demo.json").to_str().unwrap(), "--out", out, "--attack", "timing",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("attack_timing.json")).unwrap()).unwrap();
    assert_eq!(r["n_runs"], 1);
    assert!(r["warning"].is_string());
    assert_eq!(r["ci95_low"], r["ci95_high"]);
}

#[test]
fn attack_against_saved_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run(&["run", "--config", scenario("demo.json").to_str().unwrap(), "--out", out]);
    let trace = dir.path().join("trace.jsonl");
    let o = run(&["attack", "--attack", "size", "--trace", trace.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("attack_size.json")).unwrap()).unwrap();
    assert_eq!(r["n_trades"], 2.0);
    assert!(r["mitigations"]["padding"].is_null());
}

#[test]
fn monte_carlo_from_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "attack", "--attack", "timing", "--config", scenario("demo.json").to_str().unwrap(),
        "--runs", "5", "--out", out,
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("attack_timing.json")).unwrap()).unwrap();
    assert_eq!(r["n_runs"], 5);
    assert!(r["warning"].is_null());
    assert_eq!(r["mitigations"]["padding"], true);
}

#[test]
fn seed_override_changes_the_trace() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let demo = scenario("demo.json");
    run(&["run", "--config", demo.to_str().unwrap(), "--out", a.path().to_str().unwrap()]);
    run(&["run", "--config", demo.to_str().unwrap(), "--seed", "99", "--out", b.path().to_str().unwrap()]);
    let (ta, tb) = (
        std::fs::read(a.path().join("trace.jsonl")).unwrap(),
        std::fs::read(b.path().join("trace.jsonl")).unwrap(),
    );
    assert_ne!(ta, tb);
}

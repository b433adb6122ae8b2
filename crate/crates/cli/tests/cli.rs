use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_constellation"));
    // Keep the caller's environment from steering the flags under test.
    for (k, _) in std::env::vars() {
        if k.starts_with("CONSTELLATION_") {
            c.env_remove(k);
        }
    }
    c
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON ({e}): {l}")))
        .collect()
}

fn last_of(out: &Output, kind: &str) -> Value {
    lines(out)
        .into_iter()
        .rev()
        .find(|v| v["type"] == kind)
        .unwrap_or_else(|| panic!("no {kind} line"))
}

#[test]
fn scenario_exit_codes_follow_the_outcome() {
    for (n, code, outcome) in [(1, 0, "SUCCESS"), (2, 3, "PARTIAL"), (3, 4, "FAILED")] {
        let out = run(&["run", "--scenario", &n.to_string(), "--seed", "0"]);
        assert_eq!(out.status.code(), Some(code), "scenario {n}");
        assert_eq!(last_of(&out, "summary")["outcome"], outcome);
        assert_eq!(last_of(&out, "verdict")["passed"], true);
    }
}

#[test]
fn scenario_stdout_is_pinned() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for n in 1..=3 {
        let out = run(&["run", "--scenario", &n.to_string(), "--seed", "0"]);
        let text = String::from_utf8(out.stdout).unwrap();
        let path = dir.join(format!("scenario{n}.stdout.jsonl"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &text).unwrap();
        }
        let golden =
            std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            text,
            golden,
            "scenario {n} stdout drifted from {}",
            path.display()
        );
    }
}

#[test]
fn seed_comes_from_the_environment_too() {
    let flag = run(&["run", "--scenario", "2", "--seed", "5"]);
    let env = bin()
        .args(["run", "--scenario", "2"])
        .env("CONSTELLATION_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(3));
    assert_eq!(flag.stdout, env.stdout);
}

#[test]
fn missing_seed_is_a_usage_error() {
    let out = run(&["run", "--scenario", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn ad_hoc_constellation_runs_to_success() {
    let s = scenarios();
    let out = run(&[
        "run",
        "--constellation",
        s.join("example.json").to_str().unwrap(),
        "--planner-script",
        s.join("noop.json").to_str().unwrap(),
        "--seed",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = last_of(&out, "summary");
    assert_eq!(summary["outcome"], "SUCCESS");
    assert_eq!(summary["metrics"]["max_parallel_width"], 2);
    assert!(lines(&out).iter().all(|v| v["type"] != "verdict"));
}

#[test]
fn out_dir_and_log_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let md = tmp.path().join("run.md");
    let out = run(&[
        "run",
        "--scenario",
        "1",
        "--seed",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
        "--log",
        md.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["report.json", "log.md", "metrics.json", "verdict.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["outcome"], "SUCCESS");
    let log = std::fs::read_to_string(&md).unwrap();
    assert_eq!(
        log,
        std::fs::read_to_string(out_dir.join("log.md")).unwrap()
    );
    assert!(log.contains("```mermaid"));
    assert_eq!(
        last_of(&out, "files")["written"].as_array().unwrap().len(),
        5
    );
}

#[test]
fn config_that_breaks_recovery_is_a_verdict_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    // One reconnection attempt, long before linux1 comes back.
    std::fs::write(&cfg, "[backoff]\nmax_attempts = 1\n").unwrap();
    let out = run(&[
        "run",
        "--scenario",
        "1",
        "--seed",
        "0",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    let verdict = last_of(&out, "verdict");
    assert_eq!(verdict["passed"], false);
    assert!(verdict["failed_checks"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["name"] == "outcome"));
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[engine]\nretries = 1\n").unwrap();
    let out = run(&[
        "run",
        "--scenario",
        "1",
        "--seed",
        "0",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(last_of(&out, "error")["type"], "error");
}

#[test]
fn validate_distinguishes_valid_invalid_and_unreadable() {
    let ok = run(&[
        "validate",
        scenarios().join("example.json").to_str().unwrap(),
    ]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(
        last_of(&ok, "validate")["topological_order"],
        serde_json::json!(["A", "B", "C", "D", "E"])
    );

    let tmp = tempfile::tempdir().unwrap();
    let mut doc: Value =
        serde_json::from_str(&std::fs::read_to_string(scenarios().join("example.json")).unwrap())
            .unwrap();
    doc["dependencies"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({
            "id": "E->A", "from_task": "E", "to_task": "A", "dep_type": {"kind": "UNCONDITIONAL"}
        }));
    let cyclic = tmp.path().join("cyclic.json");
    std::fs::write(&cyclic, doc.to_string()).unwrap();
    let bad = run(&["validate", cyclic.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let v = last_of(&bad, "validate");
    assert_eq!(v["violations"][0]["kind"], "CYCLE");
    assert_eq!(
        v["violations"][0]["tasks"],
        serde_json::json!(["A", "C", "D", "E"])
    );

    let junk = tmp.path().join("junk.json");
    std::fs::write(&junk, "{ not json").unwrap();
    assert_eq!(
        run(&["validate", junk.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["validate", "/nonexistent/x.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn explore_golden_bound_and_extended_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("stats.json");
    let out = run(&[
        "explore",
        "--check-golden",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stats = last_of(&out, "explore");
    assert_eq!(stats["distinct_states"], 7168);
    assert_eq!(stats["bfs_depth"], 8);
    assert_eq!(last_of(&out, "golden")["matched"], true);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(written, stats);

    assert_eq!(
        run(&["explore", "--max-states", "100"]).status.code(),
        Some(7)
    );

    let off = run(&["explore", "--check-golden", "--devices", "2"]);
    assert_eq!(off.status.code(), Some(6));
    assert_eq!(last_of(&off, "golden")["matched"], false);

    let ext = run(&["explore", "--mode", "extended", "--tasks", "2"]);
    assert_eq!(ext.status.code(), Some(0));
    assert_eq!(last_of(&ext, "explore")["invariant_violations"], 0);
    assert!(lines(&ext).iter().all(|v| v["type"] != "golden"));
    assert_eq!(
        run(&["explore", "--mode", "extended", "--check-golden"])
            .status
            .code(),
        Some(2)
    );
}

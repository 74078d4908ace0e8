// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mudguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mudguard")).args(args).current_dir(root()).output().expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(name)
}

#[test]
fn clean_run_exits_zero_and_prints_a_report() {
    let out = mudguard(&["run", "scenarios/poc_two_homes.json", "--oracle"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["verdict_log"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diffs=0"));
}

#[test]
fn violations_exit_two_and_write_report_files() {
    let report = tmp("mirai.json");
    let out = mudguard(&["run", "scenarios/mirai_probe.json", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(!v["alerts"].as_array().unwrap().is_empty());
    let metrics = std::fs::read_to_string(report.with_extension("metrics")).unwrap();
    assert!(metrics.lines().all(|l| l.split_whitespace().count() == 2));
}

#[test]
fn hybrid_config_is_accepted() {
    let out = mudguard(&["run", "scenarios/hybrid_p2p.json", "--config", "scenarios/hybrid.toml", "--oracle"]);
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_is_rejected() {
    let cfg = tmp("bad.toml");
    std::fs::write(&cfg, "[control]\nno_such_knob = 1\n").unwrap();
    let out = mudguard(&["run", "scenarios/empty.json", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_knob"));
}

#[test]
fn missing_scenario_is_an_error() {
    let out = mudguard(&["run", "scenarios/nope.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_mud_lists_entries() {
    let out = mudguard(&["validate-mud", "profiles/camera.json"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("mud-url https://camera.example/mud/cam-1.json"));
    assert!(text.contains("api.camera.example"));

    let bad = tmp("bad_mud.json");
    std::fs::write(&bad, b"{\"ietf-mud:mud\": 3}").unwrap();
    assert!(!mudguard(&["validate-mud", bad.to_str().unwrap()]).status.success());
}

#[test]
fn dump_pipeline_reports_filter_count() {
    let out = mudguard(&["dump-pipeline"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("# filter_count 23"));

    let out = mudguard(&["dump-pipeline", "scenarios/poc_two_homes.json"]);
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).contains("# filter_count 23\n"));
}

#[test]
fn bench_prints_throughput() {
    let out = mudguard(&["bench", "--packets", "2000", "--threads", "2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["packets"], 2000);
    assert!(v["packets_per_sec"].as_f64().unwrap() > 0.0);
}

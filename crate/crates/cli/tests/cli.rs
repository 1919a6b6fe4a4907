use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fpnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpnas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fpnas(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_preset(dir: &Path, name: &str) -> std::path::PathBuf {
    let p = dir.join(format!("{name}.json"));
    ok(&["preset", name, "--out", s(&p)]);
    p
}

#[test]
fn presets_validate() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["nasfpn-7cell", "vanilla-fpn"] {
        let p = write_preset(dir.path(), name);
        assert!(ok(&["validate", s(&p)]).starts_with("valid"));
    }
}

#[test]
fn unknown_preset_is_a_usage_error() {
    assert_eq!(fpnas(&["preset", "resnet"]).status.code(), Some(2));
}

#[test]
fn invalid_genome_exits_one_and_unknown_keys_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_preset(dir.path(), "nasfpn-7cell");
    let mut g = json(&p);
    g["cells"][0]["b"] = g["cells"][0]["a"].clone();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, g.to_string()).unwrap();
    let report = dir.path().join("report.json");
    let out = fpnas(&["validate", s(&bad), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(1));
    let r = json(&report);
    assert_eq!(r["valid"], false);
    assert!(!r["violations"].as_array().unwrap().is_empty());

    g["cells"][0]["input_b"] = 0.into();
    std::fs::write(&bad, g.to_string()).unwrap();
    assert_eq!(fpnas(&["validate", s(&bad)]).status.code(), Some(2));
}

#[test]
fn malformed_json_and_missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(fpnas(&["validate", s(&p)]).status.code(), Some(2));
    assert_eq!(fpnas(&["validate", s(&dir.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn compile_writes_dot_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_preset(dir.path(), "vanilla-fpn");
    let dot = dir.path().join("g.dot");
    let graph = dir.path().join("g.json");
    let stdout = ok(&["compile", s(&g), "--stack", "3", "--dot", s(&dot), "--json", s(&graph)]);
    assert!(stdout.contains("stages 3"));
    let dot = std::fs::read_to_string(dot).unwrap();
    assert!(dot.starts_with("digraph"));
    let graph = json(&graph);
    assert_eq!(graph["stack_count"], 3);
}

#[test]
fn compile_rejects_indivisible_image() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_preset(dir.path(), "nasfpn-7cell");
    assert_eq!(fpnas(&["compile", s(&g), "--image-side", "100"]).status.code(), Some(1));
}

#[test]
fn cost_verify_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_preset(dir.path(), "nasfpn-7cell");
    let out = dir.path().join("cost.json");
    ok(&["cost", s(&g), "--dim", "16", "--image-side", "128", "--verify", "--out", s(&out)]);
    assert_eq!(json(&out)["verified"], true);

    ok(&["cost", s(&g), "--image-side", "128", "--compare-image-side", "256", "--out", s(&out)]);
    let c = json(&out);
    let a = c["report"]["total_flops"].as_u64().unwrap();
    let b = c["compared_to"]["total_flops"].as_u64().unwrap();
    assert_eq!(b, 4 * a);
}

#[test]
fn planted_search_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["search", "--driver", "random", "--space", "nasfpn", "--task", "planted", "--budget", "20", "--seed", "1", "--out", s(&out)]);
    for f in ["best_genome.json", "search_log.jsonl", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["total"], 20);
    let lines = std::fs::read_to_string(out.join("search_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);
    let best = out.join("best_genome.json");
    ok(&["validate", s(&best)]);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "search");
    assert_eq!(manifest["seed"], 1);
}

#[test]
fn ppo_search_improves_on_planted_reward() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ppo");
    ok(&["search", "--driver", "ppo", "--space", "nasfpn", "--task", "planted", "--budget", "3200", "--seed", "0", "--out", s(&out)]);
    let summary = json(&out.join("summary.json"));
    let first = summary["initial_window_mean"].as_f64().unwrap();
    let last = summary["final_window_mean"].as_f64().unwrap();
    assert!(last > first, "{first} -> {last}");
    assert!(out.join("controller_loss.json").exists());
}

#[test]
fn search_with_space_file_and_bad_budget() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("space.json");
    let cfg = serde_json::json!({
        "input_levels": [3, 4, 5],
        "output_levels": [5],
        "num_intermediate_cells": 1,
        "feature_dim": 8,
        "conv_mode": "full",
        "ops": ["sum", "gpool"],
    });
    std::fs::write(&space, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    ok(&["search", "--driver", "evolution", "--space", s(&space), "--task", "planted", "--budget", "30", "--seed", "2", "--out", s(&out)]);
    assert_eq!(json(&out.join("summary.json"))["total"], 30);
    let code = fpnas(&["search", "--driver", "evolution", "--space", s(&space), "--task", "planted", "--budget", "5", "--seed", "2", "--out", s(&out)])
        .status
        .code();
    assert_eq!(code, Some(2));
}

#[test]
fn train_then_eval_early_exit() {
    let dir = tempfile::tempdir().unwrap();
    let g = write_preset(dir.path(), "nasfpn-7cell");
    let run = dir.path().join("train");
    ok(&["train", s(&g), "--seed", "0", "--stack", "2", "--deep-supervision", "--steps", "20", "--out", s(&run)]);
    let summary = json(&run.join("summary.json"));
    let exits = summary["exits"].as_array().unwrap();
    assert_eq!(exits.len(), 2);
    let macs: Vec<u64> = exits.iter().map(|e| e["macs_per_image"].as_u64().unwrap()).collect();
    assert!(macs[1] > macs[0]);

    let eval = dir.path().join("eval");
    ok(&["eval", "--run", s(&run), "--early-exit", "1", "--out", s(&eval)]);
    let e = json(&eval.join("summary.json"));
    assert_eq!(e["exits"]["1"], exits[0]);
    assert_eq!(fpnas(&["eval", "--run", s(&run), "--early-exit", "3"]).status.code(), Some(2));
}

#[test]
fn rerun_rejects_unknown_command() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.json");
    let manifest = serde_json::json!({
        "command": "deploy",
        "config": {},
        "seed": 0,
        "tool_version": "0.1.0",
        "outputs": [],
        "wall_time_s": 0.0,
    });
    std::fs::write(&m, manifest.to_string()).unwrap();
    assert_eq!(fpnas(&["rerun", s(&m), "--out", s(&dir.path().join("x"))]).status.code(), Some(2));
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rvae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvae")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = rvae(args, cwd);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
    out
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = rvae(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(rvae(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(rvae(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(rvae(&["evaluate", "--out", "x", "--checkpoint", "c", "--mode", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(rvae(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = rvae(&["train", "--config", "missing.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"].as_str().unwrap().contains("config not found"));

    let out = rvae(&["probe-grid", "--checkpoint", "none.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"].as_str().unwrap().contains("checkpoint not found"));

    write(&dir.path().join("bad.json"), &json!({ "seed": 1, "typo": true }));
    let out = rvae(&["generate-gp", "--config", "bad.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"].as_str().unwrap().contains("invalid config"));
}

#[test]
fn generate_gp_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("gp.json"), &json!({ "dataset": { "tasks": 12, "context": 5, "targets": 5 } }));
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        ok(&["generate-gp", "--config", "gp.json", "--seed", seed, "--out", out], dir.path());
    }
    let (a, b, c) = (files(&dir.path().join("a")), files(&dir.path().join("b")), files(&dir.path().join("c")));
    assert_eq!(a.keys().map(|p| p.to_str().unwrap()).collect::<Vec<_>>(), ["graphs.jsonl", "manifest.json", "run_manifest.json"]);
    assert_eq!(a, b);
    assert_ne!(a[Path::new("graphs.jsonl")], c[Path::new("graphs.jsonl")]);
    let m: Value = serde_json::from_slice(&a[Path::new("run_manifest.json")]).unwrap();
    assert_eq!((m["command"].as_str(), m["seed"].as_u64()), (Some("generate-gp"), Some(7)));
    assert_eq!(m["config"]["dataset"]["tasks"], 12);
    assert_eq!(fs::read_to_string(dir.path().join("a/graphs.jsonl")).unwrap().lines().count(), 12);
}

/// Generate, train and analyse a tiny farm inside `root/run`.
fn farm_pipeline(root: &Path) -> PathBuf {
    write(
        &root.join("farm.json"),
        &json!({
            "seed": 3,
            "layout": { "seed": 4, "turbines": 6, "min_spacing": 3.0, "extent": 12.0 },
            "dataset": { "snapshots": 60, "global_conditioning": true },
        }),
    );
    write(
        &root.join("train.json"),
        &json!({
            "task": "farm",
            "dataset": "data",
            "model": { "preset": "farm", "steps": 1, "width": 8, "latent": 4 },
            "train": { "lr": 1e-3, "max_steps": 20, "batch_size": 4, "patience": 10, "eval_interval": 10, "eval_mc_samples": 2 },
        }),
    );
    write(
        &root.join("analysis.json"),
        &json!({
            "data": { "task": "farm", "dataset": "data" },
            "mc_samples": 2,
            "limit": 3,
            "polar": { "bins": 4, "min_samples": 1, "folds": 3 },
            "probe": { "grid": { "x_min": -200.0, "x_max": 400.0, "y_min": -100.0, "y_max": 100.0, "spacing": 100.0 } },
        }),
    );
    ok(&["generate-farm", "--config", "farm.json", "--out", "data"], root);
    ok(&["train", "--config", "train.json", "--seed", "5", "--out", "run/train"], root);
    let ck = "run/train/checkpoint.json";
    for mode in ["elbo", "nll", "mape"] {
        ok(&["evaluate", "--config", "analysis.json", "--checkpoint", ck, "--mode", mode, "--out", &format!("run/eval-{mode}")], root);
    }
    for cmd in ["impute", "sensitivity", "wake-polar", "probe-grid"] {
        ok(&[cmd, "--config", "analysis.json", "--checkpoint", ck, "--out", &format!("run/{cmd}")], root);
    }
    root.join("run")
}

#[test]
fn farm_pipeline_outputs_are_byte_identical_across_reruns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (farm_pipeline(a.path()), farm_pipeline(b.path()));
    let mut compared = 0;
    for e in fs::read_dir(&ra).unwrap() {
        let name = e.unwrap().file_name();
        let (fa, fb) = (files(&ra.join(&name)), files(&rb.join(&name)));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{name:?} differs");
        compared += fa.len();
    }
    assert!(compared >= 20);

    let eval: Value = serde_json::from_str(&fs::read_to_string(ra.join("eval-mape/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["metric"], "mape");
    assert!(eval["mean"].as_f64().unwrap().is_finite());
    let summary: Value = serde_json::from_str(&fs::read_to_string(ra.join("train/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_run"], 20);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(ra.join("train/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["train"]["seed"], 5);
    assert!(!manifest.to_string().contains(a.path().to_str().unwrap()));

    let polar = fs::read_to_string(ra.join("wake-polar/wake_polar.csv")).unwrap();
    assert!(polar.starts_with("turbine,bin,direction,samples,wind_true,wind_model"));
    let grid = fs::read_to_string(ra.join("probe-grid/probe_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 6 * 2);
    let imputed = fs::read_to_string(ra.join("impute/imputation.csv")).unwrap();
    assert!(imputed.starts_with("graph,node,channel,truth,predicted\n"));
    let nodes = fs::read_to_string(ra.join("sensitivity/sensitivity_nodes.csv")).unwrap();
    assert_eq!(nodes.lines().count(), 7);
}

#[test]
fn gp_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write(&root.join("gp.json"), &json!({ "dataset": { "tasks": 16, "context": 6, "targets": 6, "cutoff": 0.2 } }));
    write(
        &root.join("train.json"),
        &json!({
            "task": "gp",
            "model": { "preset": "gp", "model": { "kind": "edge_conditioned", "steps": 1 }, "width": 8, "latent": 4 },
            "train": { "lr": 1e-3, "max_steps": 10, "batch_size": 4, "patience": 10, "eval_interval": 5, "eval_mc_samples": 2, "context_range": [3, 8] },
            "stream": { "kernel": { "variance": 1.0, "lengthscale": 0.2, "noise_variance": 0.0004 }, "x_range": { "start": 0.0, "end": 1.0 }, "cutoff": 0.2, "features": "relative" },
            "test": "tasks",
        }),
    );
    write(&root.join("eval.json"), &json!({ "data": { "task": "gp", "dataset": "tasks" }, "mc_samples": 2 }));
    ok(&["generate-gp", "--config", "gp.json", "--out", "tasks"], root);
    ok(&["train", "--config", "train.json", "--out", "run"], root);
    ok(&["evaluate", "--config", "eval.json", "--checkpoint", "run/checkpoint.json", "--mode", "nll", "--out", "eval"], root);
    let eval: Value = serde_json::from_str(&fs::read_to_string(root.join("eval/evaluation.json")).unwrap()).unwrap();
    assert_eq!((eval["metric"].as_str(), eval["count"].as_u64()), (Some("target_ll"), Some(16)));
    // a GP checkpoint cannot drive farm-only commands
    let out = rvae(&["probe-grid", "--checkpoint", "run/checkpoint.json", "--out", "probe"], root);
    assert_eq!(out.status.code(), Some(1));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pillarmamba"));
    c.env("PILLARMAMBA_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn report(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON report")
}

fn error_of(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str::<Value>(line).expect("JSON error")["error"].clone()
}

/// 16×16 grid, narrow model: every command finishes in well under a second.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "grid": {"x_range": [0.0, 3.2], "y_range": [-1.6, 1.6], "z_range": [-5.0, 5.0], "pillar_size": 0.2},
        "model": {"channels": 8, "csg": {"hsb_layers": 1}, "ssm": {"state_dim": 2}},
        "scene": {"counts": {"pedestrian": [1, 2]}, "background_points": 64},
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gen"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--form", "fft"]).status.code(), Some(2));
}

#[test]
fn gen_forward_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut metrics = Vec::new();
    for (run_dir, workers) in [("a", "1"), ("b", "2")] {
        let root = dir.path().join(run_dir);
        let data = root.join("data");
        let dets = root.join("dets");
        let r = report(&run(&["gen", "--config", s(&cfg), "--out", s(&data), "--scenes", "3"]));
        assert_eq!(r["command"], "gen");
        assert_eq!(r["outputs"].as_array().unwrap().len(), 7);
        let manifest = data.join("manifest.json");
        let r = report(&run(&[
            "--workers", workers, "forward", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&dets),
        ]));
        assert_eq!(r["metrics"]["scenes"], 3);
        let r = report(&run(&[
            "--workers", workers, "eval", "--config", s(&cfg), "--manifest", s(&manifest), "--dets", s(&dets),
        ]));
        assert!(r["metrics"]["ap_r40"].is_object());
        metrics.push(std::fs::read(dets.join("metrics.json")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let a = std::fs::read(dir.path().join("a/data/clouds/scene_0000.bin")).unwrap();
    let b = std::fs::read(dir.path().join("b/data/clouds/scene_0000.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_changes_the_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        report(&run(&["--seed", seed, "gen", "--config", s(&cfg), "--out", s(&out), "--scenes", "1"]));
    }
    let a = std::fs::read(dir.path().join("1/clouds/scene_0000.bin")).unwrap();
    let b = std::fs::read(dir.path().join("2/clouds/scene_0000.bin")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let e = error_of(&run(&["eval", "--manifest", s(&missing), "--dets", s(dir.path())]));
    assert_eq!(e["command"], "eval");
    assert_eq!(e["kind"], "io");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"grid": {"x_range": [0, 12.8], "y_range": [-6.4, 6.4], "z_range": [-5, 5], "pillar_size": 0.2}, "model": {"chanels": 8}}"#).unwrap();
    let e = error_of(&run(&["gen", "--config", s(&bad), "--out", s(dir.path())]));
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("chanels"), "{e}");
}

#[test]
fn train_toy_writes_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let weights = dir.path().join("toy.pmw");
    let r = report(&run(&["train-toy", "--config", s(&cfg), "--steps", "5", "--out", s(&weights)]));
    assert_eq!(r["metrics"]["steps"], 5);
    assert!(r["metrics"]["final_loss"].as_f64().unwrap().is_finite());
    let losses = std::fs::read_to_string(weights.with_extension("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6);

    let data = dir.path().join("data");
    report(&run(&["gen", "--config", s(&cfg), "--out", s(&data), "--scenes", "1"]));
    let dets = dir.path().join("dets");
    report(&run(&[
        "forward", "--config", s(&cfg), "--manifest", s(&data.join("manifest.json")), "--weights", s(&weights),
        "--out", s(&dets),
    ]));
    assert!(dets.join("scene_0000.json").is_file());

    // weights of another architecture are refused
    let e = error_of(&run(&[
        "forward", "--manifest", s(&data.join("manifest.json")), "--weights", s(&weights), "--out", s(&dets),
    ]));
    assert_eq!(e["command"], "forward");
}

#[test]
fn bench_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("bench");
    let r = report(&run(&["bench", "--config", s(&cfg), "--repeat", "2", "--out", s(&out)]));
    assert_eq!(r["metrics"]["digest_stable"], true);
    assert!(r["metrics"]["scan_max_deviation"].as_f64().unwrap() < 1e-9);
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    let json: Value = serde_json::from_slice(&std::fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(json["scans"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_passes_on_defaults() {
    let r = report(&run(&["gradcheck", "--cases", "3"]));
    assert_eq!(r["metrics"]["passed"], true);
    assert_eq!(r["metrics"]["ops"].as_array().unwrap().len(), 7);
}

#[test]
fn diagnose_scan_reads_occupancy() {
    let dir = tempfile::tempdir().unwrap();
    let occ = dir.path().join("occ.txt");
    std::fs::write(&occ, "#..\n...\n..#\n").unwrap();
    let out = dir.path().join("diag.json");
    let rep = dir.path().join("report.json");
    let o = run(&["--report", s(&rep), "diagnose-scan", "--grid", "3x3", "--occupancy", s(&occ), "--out", s(&out)]);
    let r = report(&o);
    assert_eq!(r["metrics"]["occupied_cells"], 2);
    assert_eq!(r["metrics"]["directions"].as_array().unwrap().len(), 4);
    assert!(out.is_file());
    assert_eq!(std::fs::read(&rep).unwrap(), o.stdout);

    let e = error_of(&run(&["diagnose-scan", "--grid", "3by3"]));
    assert_eq!(e["kind"], "config");
}

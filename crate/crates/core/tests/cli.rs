//! End-to-end runs of the `mpic` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn mpic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpic")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mpic(&[]).status.code(), Some(1));
    assert_eq!(mpic(&["simulate"]).status.code(), Some(1));
    assert_eq!(mpic(&["train", "--data", "/no/such/dataset.json"]).status.code(), Some(1));
    let out = mpic(&["simulate", "--model", "/no/such/model.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
    assert_eq!(mpic(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_passes_and_reports_every_suite() {
    let dir = scratch("verify");
    let report = dir.join("report.json");
    let out = mpic(&["verify", "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    let names: Vec<&str> = v["suites"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ut", "kf-reduction", "rts-reduction", "theorem-1"]);
    assert_eq!(v["passed"], true);
}

#[test]
fn corrupted_smoother_gain_fails_verification() {
    let dir = scratch("verify-fault");
    let out = mpic(&["verify", "--fault-rts-gain", "1.05", "--report", s(&dir.join("r.json"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rts-reduction/instance-0"));
}

#[test]
fn tiny_training_run_is_fast_and_deterministic() {
    let dir = scratch("train");
    let t = Instant::now();
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.join(run);
        let out = mpic(&["train", "--arch", "6,8,4", "--dataset", "zero", "--samples", "5000", "--epochs", "10", "--seed", "7", "-o", s(&out_dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("training_report.json").exists());
        models.push(fs::read(out_dir.join("model.json")).unwrap());
    }
    assert!(t.elapsed().as_secs_f64() < 20.0);
    assert_eq!(models[0], models[1]);
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--scenario", "braking", "--model", "bicycle", "--duration", "2", "-N", "4", "-H", "15", "--seed", "3", "-o", s(dir)];
    args.extend_from_slice(extra);
    mpic(&args)
}

#[test]
fn simulation_is_byte_identical_across_runs_and_thread_counts() {
    let dir = scratch("sim");
    let mut csvs = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let d = dir.join(run);
        let out = Command::new(env!("CARGO_BIN_EXE_mpic"))
            .env("MPIC_THREADS", threads)
            .args(["simulate", "--scenario", "braking", "--model", "bicycle", "--duration", "2", "-N", "4", "-H", "15", "--seed", "3", "--no-timing", "-o", s(&d)])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push((fs::read(d.join("trace.csv")).unwrap(), fs::read(d.join("metrics.json")).unwrap()));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let text = String::from_utf8(csvs[0].0.clone()).unwrap();
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn plots_are_written_on_request() {
    let dir = scratch("plot");
    let out = simulate(&dir, &["--plot"]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["trajectory.svg", "acceleration.svg", "steering.svg", "distance.svg"] {
        let svg = fs::read_to_string(dir.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("metrics.json")).unwrap()).unwrap();
    assert!(m["mean_plan_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn single_cell_sweep_matches_simulation() {
    let dir = scratch("sweep");
    let sim = dir.join("sim");
    assert_eq!(simulate(&sim, &["--no-timing"]).status.code(), Some(0));
    let csv = dir.join("sweep.csv");
    let out = mpic(&[
        "sweep", "--scenario", "braking", "--model", "bicycle", "--duration", "2", "-H", "15", "-N", "4", "--reps", "1", "--seed", "3", "-o",
        s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "H,N,mean_cost,mean_time,std_time,failures");
    assert_eq!(lines.len(), 2);
    let cols: Vec<&str> = lines[1].split(',').collect();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(sim.join("metrics.json")).unwrap()).unwrap();
    let sweep_cost: f64 = cols[2].parse().unwrap();
    assert!((sweep_cost - m["total_cost"].as_f64().unwrap()).abs() < 1e-5);
    assert_eq!(&cols[..2], ["15", "4"]);
}

#[test]
fn scenario_files_load_and_bad_ones_are_usage_errors() {
    let dir = scratch("scenario");
    let good = dir.join("braking.json");
    fs::write(&good, mpic_core::world::Scenario::braking().to_json()).unwrap();
    let out = mpic(&["simulate", "--scenario", s(&good), "--model", "bicycle", "--duration", "0.5", "-N", "2", "-H", "5", "-o", s(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bad = dir.join("bad.json");
    fs::write(&bad, "{\"name\": 3}").unwrap();
    let out = mpic(&["simulate", "--scenario", s(&bad), "--model", "bicycle", "-o", s(&dir)]);
    assert_eq!(out.status.code(), Some(1));
}

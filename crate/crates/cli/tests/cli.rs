use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikelab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spikelab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{"d": 100, "n": 50, "tiers": [{"multiplicity": 1, "c": 0.1}, {"multiplicity": 1, "c": 0.4}]}"#;
const EXAMPLE_ONE: &str = r#"{"d": 10000, "n": 200, "tiers": [
    {"multiplicity": 1, "c": 0.2}, {"multiplicity": 1, "c": 0.4}, {"multiplicity": 1, "c": 1}]}"#;

#[test]
fn predict_reports_45_degrees_for_c_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "e.json", EXAMPLE_ONE);
    let out = run(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let third = &doc["predictions"][2];
    assert_eq!(third["index"], 3);
    assert_eq!(third["angle_limit_deg"].as_f64().unwrap(), 45.0);
    assert_eq!(doc["regime"], "distinguishable");
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let dirs = ["a", "b"].map(|d| tmp.path().join(d));
    for dir in &dirs {
        let out = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--reps",
            "6",
            "--seed",
            "9",
            "--out",
            dir.to_str().unwrap(),
        ]);
        // Small n: verification may fail, but outputs are still written.
        assert!(matches!(code(&out), 0 | 1), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["replications.csv", "aggregates.csv", "kde.csv", "pairwise.csv", "verification.json"] {
        let a = fs::read(dirs[0].join(name)).unwrap();
        let b = fs::read(dirs[1].join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
    let header = fs::read_to_string(dirs[0].join("replications.csv")).unwrap();
    assert!(header.starts_with("stream_id,index,tier,eigenvalue_ratio,angle_vector_deg,angle_subspace_deg\n"));
    // 6 reps × (2 spikes + 3 noise) rows plus header.
    assert_eq!(header.lines().count(), 1 + 6 * 5);
}

#[test]
fn simulate_exit_code_tracks_verification() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let dir = tmp.path().join("out");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "4", "--out", dir.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("verification.json")).unwrap()).unwrap();
    let pass = report["pass"].as_bool().unwrap();
    assert_eq!(code(&out), if pass { 0 } else { 1 });
}

#[test]
fn check_small_model_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let out = run(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["max"].as_f64().unwrap() <= 1e-8);
    assert_eq!(doc["pass"], true);
}

#[test]
fn check_breach_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let out = run(&["check", "--config", cfg.to_str().unwrap(), "--tolerance", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_config(tmp.path(), "u.json", r#"{"d": 100, "n": 50, "tiers": [], "bogus": 1}"#);
    let out = run(&["predict", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let invalid = write_config(
        tmp.path(),
        "i.json",
        r#"{"d": 100, "n": 50, "tiers": [{"multiplicity": 1, "c": "inf"}]}"#,
    );
    let dir = tmp.path().join("never");
    let out = run(&["simulate", "--config", invalid.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tiers[0].lambda"));
    assert!(!dir.exists(), "no output on config error");

    let out = run(&["predict"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn kde_from_replications() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let dir = tmp.path().join("sim");
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "8", "--out", dir.to_str().unwrap()]);
    let kde_path = tmp.path().join("kde.csv");
    let out = run(&[
        "kde",
        "--in",
        dir.join("replications.csv").to_str().unwrap(),
        "--column",
        "angle_vector_deg",
        "--index",
        "1",
        "--out",
        kde_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&kde_path).unwrap();
    assert!(text.starts_with("index,grid_deg,density\n"));
    assert_eq!(text.lines().count(), 513);

    let out = run(&[
        "kde",
        "--in",
        dir.join("replications.csv").to_str().unwrap(),
        "--column",
        "nope",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn sweep_writes_table() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", r#"{"d": 1, "n": 2, "tiers": [{"multiplicity": 1, "c": 1}]}"#);
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "20,40",
        "--d-over-n",
        "10",
        "--reps",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,d,index,tier,lambda,predicted_deg,mean_angle_deg,mean_abs_deviation_deg");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("20,200,1,1,10,45,"));
    assert!(lines[2].starts_with("40,400,1,1,10,45,"));
}

#[test]
fn hdlss_writes_draws_and_verification() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "h.json", r#"{"d": 400, "n": 10, "tiers": [{"multiplicity": 1, "c": 2}]}"#);
    let dir = tmp.path().join("h");
    let out = run(&[
        "hdlss",
        "--config",
        cfg.to_str().unwrap(),
        "--draws",
        "500",
        "--reps",
        "20",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(matches!(code(&out), 0 | 1), "{}", String::from_utf8_lossy(&out.stderr));
    let draws = fs::read_to_string(dir.join("limit_draws.csv")).unwrap();
    assert!(draws.starts_with("draw,index,w_eigenvalue,eigenvalue_ratio,angle_deg\n"));
    assert_eq!(draws.lines().count(), 501);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("verification.json")).unwrap()).unwrap();
    assert_eq!(doc["report"]["criteria"].as_array().unwrap().len(), 3);
}

#[test]
fn threads_flag_and_env() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", SMALL);
    let out = bin()
        .args(["check", "--config", cfg.to_str().unwrap()])
        .env("SPIKELAB_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let out = run(&["--threads", "0", "check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

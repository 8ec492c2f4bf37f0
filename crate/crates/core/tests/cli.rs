use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sopo");

const SMALL_VERIFY: &str = "[verify]\ninstances = 4\nbound_trials = 50\ndegeneracy_trials = 50\nnegative_control_failures = 3\n";

fn sopo(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SOPO_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("SOPO_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_passes_and_writes_one_record_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_VERIFY);
    let out = dir.path().join("out");
    let o = sopo(&["verify", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("verify_report.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 14);
    for r in &records {
        assert_eq!(r["passed"], true, "{r}");
        assert!(r["check"].is_string() && r["measured"].is_number() && r["threshold"].is_number());
    }
}

#[test]
fn zero_tolerance_fails_with_exit_one_and_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL_VERIFY}\n[tolerances]\nidentity = 0.0\npartition = 0.0\ndegeneracy = 0.0\n");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("out");
    let o = sopo(&["verify", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("verify_report.jsonl")).unwrap();
    let failed: Vec<serde_json::Value> =
        report.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()).filter(|r| r["passed"] == false).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r["measured"].as_f64().is_some_and(|m| m >= 0.0) && r["threshold"] == 0.0));
}

#[test]
fn unknown_field_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nbeta = 1.0\ngamma = 3.0\n");
    let o = sopo(&["verify", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(sopo(&["bench", "--omega", "linear", "--out", out], None).status.code(), Some(2));
    assert_eq!(sopo(&["bench", "--beta", "-1", "--out", out], None).status.code(), Some(2));
    assert_eq!(sopo(&["verify", "--config", "/nonexistent/run.toml"], None).status.code(), Some(2));
    let cfg = write_config(dir.path(), "[schedule]\nomega = \"linear\"\n");
    assert_eq!(sopo(&["train-diffusion", "--config", &cfg], None).status.code(), Some(2));
}

#[test]
fn bench_with_zero_iterations_reports_the_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nbench_seeds = 2\n");
    let out = dir.path().join("out");
    let o = sopo(&["bench", "--config", &cfg, "--iters", "0", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("bench_summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let regime_col = header.iter().position(|h| *h == "regime").unwrap();
    let seed_col = header.iter().position(|h| *h == "seed").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for seed in ["0", "1"] {
        let for_seed: Vec<&Vec<&str>> = rows.iter().filter(|r| r[seed_col] == seed).collect();
        assert_eq!(for_seed.len(), 5);
        let initial = for_seed.iter().find(|r| r[regime_col] == "initial").unwrap();
        for r in &for_seed {
            let strip = |row: &Vec<&str>| row.iter().enumerate().filter(|(i, _)| *i != regime_col).map(|(_, v)| v.to_string()).collect::<Vec<_>>();
            assert_eq!(strip(r), strip(initial));
        }
    }
}

#[test]
fn train_diffusion_with_zero_iterations_keeps_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = sopo(&["train-diffusion", "--iters", "0", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diffusion_checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["theta"], ckpt["reference"]);
    assert_eq!(ckpt["vu_total"].as_u64().unwrap() + ckpt["hu_total"].as_u64().unwrap(), 0);
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_VERIFY);
    let env_out = dir.path().join("from-env");
    let o = sopo(&["verify", "--config", &cfg], Some(&env_out));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(env_out.join("verify_report.jsonl").is_file());

    let flag_out = dir.path().join("from-flag");
    let o = sopo(&["verify", "--config", &cfg, "--out", flag_out.to_str().unwrap()], Some(&env_out));
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_out.join("verify_report.jsonl").is_file());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nk = 3\n[diffusion]\nbatch_size = 4\nn_winners = 8\n");
    let out = dir.path().join("out");
    let o = sopo(&["train-diffusion", "--config", &cfg, "--iters", "3", "--k", "2", "--t-steps", "10", "--omega", "snr", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let curve = fs::read_to_string(out.join("diffusion_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn flowproc(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowproc"));
    cmd.args(args).env_remove("FLOWPROC_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn run(command: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), config);
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    flowproc(&args, &[])
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

const SMALL_PARTICLES: &str = r#"{"numerics": {"t_final": 0.1, "readout_times": [0.0]}, "mc": {"replicates": 200}}"#;

#[test]
fn unknown_command_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run("simulate", "{}", &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown command"));
    assert!(!out.exists());
}

#[test]
fn invalid_config_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    for body in [r#"{"numerics": {"dtt": 1}}"#, r#"{"numerics": {"dx": -1}}"#, "not json"] {
        let o = run("particles", body, &out, &[]);
        assert_eq!(o.status.code(), Some(1), "{body}");
        assert!(!out.exists(), "{body}");
    }
    let o = flowproc(&["particles", "--config", "/nonexistent/config.json"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_PARTICLES);
    let out = tmp.path().join("out");
    let args = ["particles", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = flowproc(&args, &[("FLOWPROC_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let o = flowproc(&args, &[("FLOWPROC_THREADS", "1")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn particles_report_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("particles", SMALL_PARTICLES, &a, &["--seed", "5"]).status.code(), Some(0));
    assert_eq!(run("particles", SMALL_PARTICLES, &b, &["--seed", "5"]).status.code(), Some(0));
    let csv_a = fs::read(a.join("replicates.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("replicates.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "replicate,seed,time,atoms,one,\"gauss(0,0.5)\"");
    // two readouts per replicate
    assert_eq!(lines.count(), 400);

    let s = summary(&a);
    assert_eq!(s["schema_version"], "1.0");
    assert_eq!(s["seed"], 5);
    assert_eq!(s["status"], "pass");
    assert_eq!(s["config"]["numerics"]["dx"], 0.01);
    assert_eq!(s["config"]["mc"]["replicates"], 200);

    let c = run("particles", SMALL_PARTICLES, &tmp.path().join("c"), &["--seed", "6"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(fs::read(a.join("replicates.csv")).unwrap(), fs::read(tmp.path().join("c/replicates.csv")).unwrap());
}

#[test]
fn snake_command() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"numerics": {"t_final": 0.2, "readout_times": [0.0, 0.1]}, "mc": {"replicates": 30}}"#;
    let o = run("snake", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert!(text.starts_with("replicate,seed,time,atoms,diameter,horizon_reached,"));
    assert_eq!(text.lines().count(), 1 + 90);
}

#[test]
fn spde_command_without_enough_fields_skips_regression() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"numerics": {"t_final": 0.05, "dx": 0.05, "spde_dt": 2e-4}, "mc": {"replicates": 10}}"#;
    let o = run("spde", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("holder.csv")).unwrap(), "scale,log_moment\n");
    let s = summary(&out);
    assert!(s["notes"][0].as_str().unwrap().contains("skipped"));
}

#[test]
fn loglaplace_command() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"model": {"family": {"kind": "constant", "dim": 1, "drift": [0.0], "sigma1": [0.5], "sigma2": [1.0]},
                   "delta": 0.5, "bound": 1.0, "branching_rate": 2.0},
                 "numerics": {"t_final": 0.2, "dx": 0.02, "inner_replicates": 200}, "mc": {"replicates": 3}}"#;
    let o = run("loglaplace", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("paths.csv")).unwrap().lines().count(), 4);
    assert!(fs::read_to_string(out.join("y0.csv")).unwrap().starts_with("x,y0\n"));
}

#[test]
fn duality_command_matches_closed_form() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"test_functions": [{"kind": "one"}], "numerics": {"t_final": 1.0, "dx": 0.1}, "mc": {"replicates": 2000}}"#;
    let o = run("duality", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!((s["estimates"][0]["exact"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(s["checks"][0]["pass"], true);
}

#[test]
fn verify_all_at_toy_scale_reports_check_failures() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run("verify-all", "{}", &out, &["--replicates", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("checks.csv")).unwrap();
    assert!(text.starts_with("id,criterion,quantity,value,target,tolerance,pass\n"));
    for id in 1..=10 {
        assert!(text.lines().any(|l| l.starts_with(&format!("{id},"))), "criterion {id} missing");
    }
    let s = summary(&out);
    assert_eq!(s["status"], "fail");
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 10);
}

use std::path::Path;
use std::process::Command;

use drekf_sim::cli::{main_with_args, EXIT_NUMERICAL, EXIT_OK, EXIT_USER};
use drekf_sim::config::{apply_override, parse_table, raw_from_table, template};
use drekf_sim::persist::{persist_experiment, read_summary, read_sweep_summary};
use drekf_sim::{run_scenario, EstimatorKind, RunOptions, Scenario};
use tempfile::TempDir;

const SMALL_CT: [&str; 4] = ["--override", "scenario.runs=3", "--override", "scenario.horizon=8"];

fn repo_config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = main_with_args(std::iter::once("drekf").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn run_in(out: &Path, args: &[&str]) -> (i32, String) {
    let mut all = vec!["--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn small_ct_args<'a>(cfg: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", cfg];
    v.extend_from_slice(&SMALL_CT);
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_writes_outputs_and_reports_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = repo_config("ct_tracking.toml");
    let mut args = vec!["run", "--dump-sdp"];
    args.extend(small_ct_args(&cfg, &[]));
    let (code, stdout) = run_in(dir.path(), &args);
    assert_eq!(code, EXIT_OK);
    for kind in EstimatorKind::ALL {
        assert!(stdout.contains(&format!("{} mse_mean=", kind.as_str())), "{stdout}");
    }
    for f in ["summary.csv", "totals.csv", "records.jsonl", "runs.csv", "config.toml", "audit.csv", "trajectory_median.csv", "sdp_dump.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }

    let dump = dir.path().join("sdp_dump.json");
    let (code, stdout) = run(&["verify-sdp", "--dump", dump.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{stdout}");
    assert!(stdout.ends_with("all constraints within tolerance\n"));
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = repo_config("ct_tracking.toml");
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    for (d, jobs) in dirs.iter().zip(["1", "2"]) {
        let mut args = vec!["run", "--jobs", jobs];
        args.extend(small_ct_args(&cfg, &[]));
        assert_eq!(run_in(d.path(), &args).0, EXIT_OK);
    }
    for f in ["summary.csv", "totals.csv", "records.jsonl", "runs.csv", "config.toml", "audit.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between reruns");
    }
}

#[test]
fn summary_round_trips_through_csv() {
    let mut t = parse_table(template("ct_tracking").unwrap()).unwrap();
    apply_override(&mut t, "scenario.runs", "4").unwrap();
    apply_override(&mut t, "scenario.horizon", "6").unwrap();
    let s = Scenario::from_raw(raw_from_table(&t).unwrap()).unwrap();
    let exp = run_scenario(&s, &RunOptions::default()).unwrap();
    let dir = TempDir::new().unwrap();
    persist_experiment(dir.path(), &s.raw, &exp, &s.estimators).unwrap();
    assert_eq!(read_summary(dir.path()).unwrap(), exp.summary);
}

#[test]
fn single_value_sweep_matches_run() {
    let cfg = repo_config("ct_tracking.toml");
    let run_dir = TempDir::new().unwrap();
    let sweep_dir = TempDir::new().unwrap();
    let mut args = vec!["run"];
    args.extend(small_ct_args(&cfg, &["--override", "drekf.theta=0.002"]));
    assert_eq!(run_in(run_dir.path(), &args).0, EXIT_OK);

    let mut args = vec!["sweep", "--key", "drekf.theta", "--values", "0.002"];
    args.extend(small_ct_args(&cfg, &[]));
    let (code, stdout) = run_in(sweep_dir.path(), &args);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.starts_with("drekf.theta=0.002 "), "{stdout}");

    let sub = sweep_dir.path().join("drekf.theta=0.002");
    for f in ["summary.csv", "records.jsonl", "config.toml"] {
        assert_eq!(
            std::fs::read(run_dir.path().join(f)).unwrap(),
            std::fs::read(sub.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let merged = read_sweep_summary(sweep_dir.path()).unwrap();
    assert_eq!(merged.len(), 1);
    assert_eq!(merged[0].1, read_summary(run_dir.path()).unwrap());
}

#[test]
fn sweep_over_turn_rate_uses_bare_key() {
    let cfg = repo_config("ct_tracking.toml");
    let dir = TempDir::new().unwrap();
    let mut args = vec!["sweep", "--key", "omega0", "--values", "-0.3,0.3"];
    args.extend(small_ct_args(&cfg, &[]));
    let (code, stdout) = run_in(dir.path(), &args);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("omega0=-0.3 ekf_nominal"));
    assert!(stdout.contains("omega0=0.3 drekf"));
    assert_eq!(read_sweep_summary(dir.path()).unwrap().len(), 2);
}

#[test]
fn zero_radius_and_curvature_matches_nominal_ekf() {
    let mut t = parse_table(template("ct_tracking").unwrap()).unwrap();
    for (k, v) in [
        ("scenario.runs", "5"),
        ("scenario.horizon", "20"),
        ("drekf.theta", "0.0"),
        ("drekf.curvature", "{ lf = 0.0, lh = 0.0 }"),
    ] {
        apply_override(&mut t, k, v).unwrap();
    }
    let s = Scenario::from_raw(raw_from_table(&t).unwrap()).unwrap();
    let exp = run_scenario(&s, &RunOptions::default()).unwrap();
    for r in &exp.records {
        let ekf = r.get(EstimatorKind::EkfNominal).unwrap();
        let dr = r.get(EstimatorKind::Drekf).unwrap();
        for (a, b) in ekf.stages.iter().zip(&dr.stages) {
            assert!((a.posterior_sq - b.posterior_sq).abs() <= 1e-6 * (1.0 + a.posterior_sq));
        }
    }
    let ekf = exp.summary.get(EstimatorKind::EkfNominal).unwrap().mse_mean;
    let dr = exp.summary.get(EstimatorKind::Drekf).unwrap().mse_mean;
    assert!((ekf - dr).abs() <= 1e-6 * (1.0 + ekf), "{ekf} vs {dr}");
}

#[test]
fn no_obstacles_means_no_collisions() {
    let mut t = parse_table(template("safe_nav").unwrap()).unwrap();
    for (k, v) in [("scenario.runs", "3"), ("scenario.horizon", "30"), ("mpc.obstacles", "[]")] {
        apply_override(&mut t, k, v).unwrap();
    }
    let s = Scenario::from_raw(raw_from_table(&t).unwrap()).unwrap();
    let exp = run_scenario(&s, &RunOptions::default()).unwrap();
    for e in &exp.summary.estimators {
        assert_eq!(e.collision_rate, Some(0.0), "{}", e.estimator);
    }
}

#[test]
fn echo_config_round_trips() {
    for name in ["ct_tracking", "safe_nav"] {
        let (code, first) = run(&["echo-config", "--template", name]);
        assert_eq!(code, EXIT_OK);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("echo.toml");
        std::fs::write(&path, &first).unwrap();
        let (code, second) = run(&["echo-config", "--config", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(first, second);
        assert!(first.contains("non-paper-default"));
    }
}

#[test]
fn user_errors_exit_with_one() {
    let cfg = repo_config("ct_tracking.toml");
    let dir = TempDir::new().unwrap();
    assert_eq!(run_in(dir.path(), &["run"]).0, EXIT_USER);
    assert_eq!(run_in(dir.path(), &["run", "--config", "/nonexistent/x.toml"]).0, EXIT_USER);
    assert_eq!(run_in(dir.path(), &["run", "--config", &cfg, "--override", "nope.key=1"]).0, EXIT_USER);
    assert_eq!(run_in(dir.path(), &["run", "--config", &cfg, "--override", "truth.v_cov=[-1.0, 0.25]"]).0, EXIT_USER);
    assert_eq!(run_in(dir.path(), &["run", "--config", &cfg, "--override", "drekf.theta"]).0, EXIT_USER);
    assert_eq!(run_in(dir.path(), &["sweep", "--config", &cfg, "--key", "bogus", "--values", "1"]).0, EXIT_USER);
    assert_eq!(run(&["echo-config", "--template", "unknown"]).0, EXIT_USER);
    assert_eq!(run(&["verify-sdp", "--dump", "/nonexistent/dump.json"]).0, EXIT_USER);
    assert_eq!(run(&["frobnicate"]).0, EXIT_USER);
}

#[test]
fn corrupted_dump_is_a_numerical_failure() {
    let cfg = repo_config("ct_tracking.toml");
    let dir = TempDir::new().unwrap();
    let mut args = vec!["run", "--dump-sdp"];
    args.extend(small_ct_args(&cfg, &[]));
    assert_eq!(run_in(dir.path(), &args).0, EXIT_OK);
    let path = dir.path().join("sdp_dump.json");
    let mut dump: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let obj = &mut dump["stages"][1]["solution"]["objective"];
    *obj = serde_json::json!(obj.as_f64().unwrap() * 1.5);
    std::fs::write(&path, serde_json::to_vec(&dump).unwrap()).unwrap();
    let (code, stdout) = run(&["verify-sdp", "--dump", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_NUMERICAL);
    assert!(stdout.contains("VIOLATED"));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_drekf");
    let status = Command::new(bin).args(["echo-config", "--template", "ct_tracking"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&status.stdout).contains("[scenario]"));
    let status = Command::new(bin).args(["run"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USER));
    assert!(String::from_utf8_lossy(&status.stderr).contains("--config"));
}

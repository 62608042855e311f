use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_spacecraft-consensus");

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Bundled scenario with a shorter horizon.
fn short_scenario(dir: &Path, t_final: f64) -> PathBuf {
    let text = fs::read_to_string(bundled("formation4.json")).unwrap();
    let text = text.replace("\"t_final\": 200.0", &format!("\"t_final\": {t_final}"));
    let path = dir.join("short.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_default_scenario_reaches_consensus() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "simulate",
        "--config",
        bundled("formation4.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("consensus true"), "{}", stdout(&o));
    let kv = fs::read_to_string(out.path().join("report.kv")).unwrap();
    assert!(kv.contains("consensus_achieved=true"));
    assert!(kv.contains("termination=completed"));
    let header = fs::read_to_string(out.path().join("trace.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("t,craft1_sigma_x,craft1_sigma_y,craft1_sigma_z,craft1_sigma_dot_x"));
    assert!(header.ends_with("craft4_tau_z,consensus_error"));
    for f in ["attitudes.svg", "torques.csv", "angular_velocities.csv", "attitude_rates.csv"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

#[test]
fn divergent_run_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "simulate",
        "--config",
        bundled("formation4_low_gain.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kv = fs::read_to_string(out.path().join("report.kv")).unwrap();
    assert!(kv.contains("diverged=true"));
    assert!(kv.contains("consensus_achieved=false"));
}

#[test]
fn gamma_override_matches_low_gain_file() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let base = bundled("formation4.json");
    let o = cli(&["simulate", "--config", base.to_str().unwrap(), "--gamma", "0.1", "--out", a.path().to_str().unwrap()]);
    assert!(o.status.success());
    let low = bundled("formation4_low_gain.json");
    let o = cli(&["simulate", "--config", low.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(a.path().join("trace.csv")).unwrap(),
        fs::read(b.path().join("trace.csv")).unwrap()
    );
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path(), 30.0);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("trace.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn several_configs_with_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path(), 20.0);
    let low = bundled("formation4_low_gain.json");
    let out = dir.path().join("out");
    let o = cli(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        low.to_str().unwrap(),
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("short/trace.csv").exists());
    assert!(out.join("formation4_low_gain/trace.csv").exists());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn analyze_reports_bounds_and_reference() {
    let out = tempfile::tempdir().unwrap();
    let o = cli(&[
        "analyze",
        "--config",
        bundled("formation4.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("gamma lower bound   1.414214"), "{text}");
    assert!(text.contains("9.6346"));
    let kv = fs::read_to_string(out.path().join("analysis.kv")).unwrap();
    assert!(kv.contains("delay_bound_asymptotic_ok=true"));
    assert!(kv.contains("omega_points=20000"));
    assert!(out.path().join("lmi_problem.txt").exists());
    assert!(out.path().join("delay_bound_curve.csv").exists());
}

#[test]
fn analyze_grid_flags() {
    let o = cli(&[
        "analyze",
        "--config",
        bundled("formation4.json").to_str().unwrap(),
        "--omega-min",
        "0.01",
        "--omega-max",
        "100",
        "--omega-points",
        "500",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("500 log-spaced points on [0.01, 100]"));
    let bad = cli(&["analyze", "--config", bundled("formation4.json").to_str().unwrap(), "--omega-points", "1"]);
    assert!(!bad.status.success());
}

#[test]
fn verify_lmi_identity_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let cand = dir.path().join("cand.txt");
    let mut text = String::from("# identity candidate\n");
    for (i, j) in [(1, 2), (2, 3), (2, 4), (3, 1)] {
        text.push_str(&format!("[Q {i} {j}]\nidentity\n[S {i} {j}]\nidentity 0.5\n"));
    }
    fs::write(&cand, text).unwrap();
    let o = cli(&[
        "verify-lmi",
        "--config",
        bundled("formation4.json").to_str().unwrap(),
        "--candidate",
        cand.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("psi2")).unwrap().to_string();
    assert!(line.contains("negative_definite=false"), "{line}");

    fs::write(&cand, "[Q 1 2]\nidentity\n").unwrap();
    let o = cli(&[
        "verify-lmi",
        "--config",
        bundled("formation4.json").to_str().unwrap(),
        "--candidate",
        cand.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn calibrate_dde_prints_oracle() {
    let o = cli(&["calibrate-dde"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("-0.500000000000000"), "{text}");
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled("formation4.json")).unwrap();
    let no_gamma = text.replace("\"gamma\": 5.0,", "");
    let path = dir.path().join("bad.json");
    fs::write(&path, no_gamma).unwrap();
    let o = cli(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gamma required"), "{}", stderr(&o));

    let o = cli(&["simulate", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn run_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path(), 20.0);
    let out = dir.path().join("both");
    let o = cli(&["run", "--config", cfg.to_str().unwrap(), "--mode", "both", "--out", out.to_str().unwrap(), "--omega-points", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("trace.csv").exists());
    assert!(out.join("analysis.kv").exists());
}

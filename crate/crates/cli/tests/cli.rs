use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn template(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates").join(name)
}

fn run(args: &[&str], out: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lo-risk"));
    cmd.args(args).arg("--output-dir").arg(out);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn fit_writes_a_summary_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let cfg = template("logistic_lasso.cfg");
    let o = run(&["fit", "--config", cfg.to_str().unwrap()], &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["command"], "fit");
    assert_eq!(s["exit_code"], 0);
    assert_eq!(s["seed"], 7);
    assert_eq!(s["result"]["converged"], true);
    assert_eq!(s["result"]["beta_hat"].as_array().unwrap().len(), 30);
}

#[test]
fn bad_config_exits_two_and_names_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let cfg = template("logistic_lasso.cfg");
    let o = run(
        &["fit", "--config", cfg.to_str().unwrap(), "--set", "penalty.eta=1.5", "--set", "model.bogus=1"],
        &out,
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("penalty.eta"), "{err}");
    assert!(err.contains("model.bogus"), "{err}");
    assert!(!out.exists());
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("dry");
    let cfg = template("poisson_glasso.cfg");
    let o = run(&["rate", "--config", cfg.to_str().unwrap(), "--dry-run"], &out, &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&o.stdout).is_empty());
    assert!(!out.exists());
}

#[test]
fn command_line_overrides_beat_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = template("logistic_lasso.cfg");
    let a = tmp.path().join("env");
    let o = run(&["fit", "--config", cfg.to_str().unwrap()], &a, &[("LO_RISK_PENALTY__LAMBDA", "3.0")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(summary(&a)["config"].as_str().unwrap().contains("lambda = 3.0"));
    let b = tmp.path().join("both");
    let o = run(
        &["fit", "--config", cfg.to_str().unwrap(), "--set", "penalty.lambda=0.5"],
        &b,
        &[("LO_RISK_PENALTY__LAMBDA", "3.0")],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(summary(&b)["config"].as_str().unwrap().contains("lambda = 0.5"));
}

#[test]
fn a_failed_audit_exits_one_with_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("audit");
    let cfg = template("logistic_lasso.cfg");
    // shrinking the right-hand side far below the inequality makes the audit fail
    let o = run(
        &["audit-lemma8", "--config", cfg.to_str().unwrap(), "--set", "audit.rhs_scale=1e-9"],
        &out,
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("bound_audit.csv").exists());
    assert_eq!(summary(&out)["exit_code"], 1);
}

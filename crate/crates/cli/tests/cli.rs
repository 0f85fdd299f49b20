//! End-to-end tests of the `cmfc` binary: artifact schemas, byte-level
//! reproducibility and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmfc")).args(args).output().expect("run cmfc")
}

fn write_scenario(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.ini");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_LQ: &str = "\
[model]
b1 = -0.5
b2 = 0.2
s1 = 0.2
v0 = 0.04
[constraint]
h = 0.5
[run]
mode = lq-constrained
N = 300
M = 10
seed = 3
[output]
max_particles = 20
";

fn run_into(scenario: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--scenario", scenario, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cmfc(&args)
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn golden_headers_and_report_keys() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SMALL_LQ);
    let out = dir.path().join("out");
    let o = run_into(&sc, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(first_line(&out.join("paths.csv")), "step,t,particle,x,a");
    assert_eq!(first_line(&out.join("moments.csv")), "step,t,mean_x,var_x,mean_a");
    assert_eq!(first_line(&out.join("adjoint.csv")), "step,t,particle,y,z");
    // 11 steps x 20 written particles.
    assert_eq!(fs::read_to_string(out.join("paths.csv")).unwrap().lines().count(), 1 + 11 * 20);

    let smp: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("smp.json")).unwrap()).unwrap();
    for key in [
        "min_condition_residual",
        "support_violation",
        "slackness_integral",
        "normalization_error",
        "primal_feasibility",
        "r0",
    ] {
        assert!(smp.get(key).is_some(), "smp.json lacks {key}");
    }
    let res: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("residuals.json")).unwrap()).unwrap();
    assert!(res["degree_used"].as_array().is_some_and(|d| !d.is_empty()));
    assert!(res.get("max_degree_used").is_some());

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "lq-constrained");
    for key in ["scenario_hash", "timings", "cost", "smp", "convergence", "artifacts"] {
        assert!(report.get(key).is_some(), "report.json lacks {key}");
    }
    assert!(report["cost"]["ci_halfwidth"].as_f64().unwrap() > 0.0);
}

#[test]
fn csvs_are_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SMALL_LQ);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(run_into(&sc, &a, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(run_into(&sc, &b, &["--threads", "4"]).status.code(), Some(0));
    assert_eq!(run_into(&sc, &c, &["--threads", "4"]).status.code(), Some(0));
    for f in ["paths.csv", "moments.csv", "adjoint.csv", "smp.json", "residuals.json"] {
        let fa = fs::read(a.join(f)).unwrap();
        assert_eq!(fa, fs::read(b.join(f)).unwrap(), "{f} differs between 1 and 4 threads");
        assert_eq!(fa, fs::read(c.join(f)).unwrap(), "{f} differs between reruns");
    }
}

#[test]
fn seed_override_changes_results_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SMALL_LQ);
    let runs: Vec<_> = [("a", "run.seed=7"), ("b", "run.seed=7"), ("c", "run.seed=8")]
        .iter()
        .map(|(name, set)| {
            let out = dir.path().join(name);
            assert_eq!(run_into(&sc, &out, &["--set", set]).status.code(), Some(0));
            fs::read(out.join("moments.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
}

#[test]
fn bridge_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(
        dir.path(),
        "[model]\nb1 = -0.3\nb2 = 0\nb3 = 1\n[run]\nmode = bridge\ndt_list = 0.1, 0.05\n",
    );
    let out = dir.path().join("out");
    assert_eq!(run_into(&sc, &out, &[]).status.code(), Some(0));
    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "dt,sup_error,order_estimate");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(','), "first row has no order estimate: {}", lines[1]);
    let order: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.8..=1.2).contains(&order), "{order}");
}

#[test]
fn fj_suite_mode_passes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "[run]\nmode = fj-suite\n");
    let out = dir.path().join("out");
    assert_eq!(run_into(&sc, &out, &[]).status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["details"]["all_pass"], true);
}

#[test]
fn malformed_key_exits_2_naming_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "[run]\nmode = mfg\n\n[model]\nbogus = 1\n");
    let o = run_into(&sc, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5") && err.contains("model.bogus"), "{err}");
}

#[test]
fn bad_override_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SMALL_LQ);
    let o = run_into(&sc, &dir.path().join("out"), &["--set", "run.N=lots"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.N"));
    let o = run_into(dir.path().join("missing.ini").to_str().unwrap(), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), SMALL_LQ);
    let out = dir.path().join("out");
    let o = run_into(&sc, &out, &["--set", "run.max_iter=1", "--set", "run.tol=1e-14"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());
}

#[test]
fn stochastic_bridge_is_rejected_as_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "[model]\ns1 = 0.2\n[run]\nmode = bridge\n");
    let o = run_into(&sc, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_acceptance_suite_exits_2() {
    let o = cmfc(&["acceptance", "medium"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("medium"));
}

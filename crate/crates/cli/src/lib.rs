//! Scenario runner behind the `cmfc` binary: dispatches a resolved scenario
//! to its pipeline, writes the CSV/JSON artifacts and maps outcomes to exit
//! codes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::{json, Value};

use cmfc::bridge::convergence_study;
use cmfc::fj::toy_suite::run_toy_suite;
use cmfc::lq::{mfg_solve, riccati_solve, solve_constrained, solve_unconstrained, LqOutcome};
use cmfc::mvsde::{
    directional_derivative_check, path_distance, picard_iterate, simulate_forward, ControlPolicy, CostEstimate,
    CostFunctional, SimulationSetup, TimeGrid,
};
use cmfc::output::{write_adjoint, write_comparison, write_json, write_moments, write_paths};
use cmfc::scenario::{Mode, Scenario};
use cmfc::smp::SmpReport;
use cmfc::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Override { .. } | Error::Config(_) | Error::InvalidInput(_) => EXIT_PARSE,
        Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
        _ => EXIT_NUMERICAL,
    }
}

/// Convergence log of the main loop of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub tolerance: f64,
    pub residual_history: Vec<f64>,
}

/// Machine-readable summary of one run (`report.json`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub scenario_hash: String,
    pub scenario: Scenario,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub cost: Option<CostEstimate>,
    pub smp: Option<SmpReport>,
    pub convergence: Option<Convergence>,
    /// Mode-specific results, each with its tolerance where one applies.
    pub details: Value,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    /// Exit code implied by the report (non-convergence or failed checks).
    pub fn exit_code(&self) -> i32 {
        if self.convergence.as_ref().is_some_and(|c| !c.converged) {
            return EXIT_NOT_CONVERGED;
        }
        if self.details.get("all_pass").and_then(Value::as_bool) == Some(false) {
            return EXIT_NUMERICAL;
        }
        EXIT_OK
    }
}

struct Run<'a> {
    out: &'a Path,
    verbose: bool,
    timings: BTreeMap<String, f64>,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[cmfc] {}", msg.as_ref());
        }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> cmfc::Result<T>) -> cmfc::Result<T> {
        self.log(format!("{stage}: start"));
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        self.log(format!("{stage}: {secs:.2} s"));
        self.timings.insert(stage.to_string(), secs);
        r
    }

    fn emit(&mut self, name: &str, f: impl FnOnce(BufWriter<File>) -> cmfc::Result<()>) -> cmfc::Result<()> {
        let path = self.out.join(name);
        f(BufWriter::new(File::create(&path)?))?;
        self.log(format!("wrote {}", path.display()));
        self.artifacts.push(path);
        Ok(())
    }

    fn emit_lq(&mut self, sc: &Scenario, o: &LqOutcome) -> cmfc::Result<()> {
        self.emit("paths.csv", |w| write_paths(&o.ensemble, sc.max_particles, w))?;
        self.emit("moments.csv", |w| write_moments(&o.ensemble, w))?;
        self.emit("adjoint.csv", |w| write_adjoint(&o.ensemble, &o.adjoint, sc.max_particles, w))?;
        self.emit("smp.json", |w| write_json(&o.report.smp, w))?;
        let residuals = o.adjoint.residual_report(Some(o.report.bsde_residual));
        self.emit("residuals.json", |w| write_json(&residuals, w))
    }
}

fn lq_details(sc: &Scenario, o: &LqOutcome) -> Value {
    let r = &o.report;
    let mut d = json!({
        "cost_ci_halfwidth": r.cost.ci_halfwidth,
        "bsde_residual": r.bsde_residual,
        "min_r_squared": r.min_r_squared,
        "smp_min_condition_residual": r.smp.min_condition_residual,
    });
    if let Some(reference) = r.reference_value {
        d["riccati_value"] = json!(reference);
        d["relative_error_vs_riccati"] = json!((r.cost.value - reference).abs() / reference);
    }
    if sc.model.constrained {
        d["feasibility_quantiles"] = json!(r.feasibility_quantiles);
        d["slackness_integral"] = json!(r.slackness_integral);
        d["slackness_tolerance"] = json!(1e-3 * (1.0 + r.eta_norm));
        d["eta_norm"] = json!(r.eta_norm);
        d["active_fraction"] = json!(r.active_fraction);
    }
    d
}

fn lq_convergence(sc: &Scenario, o: &LqOutcome) -> Convergence {
    Convergence {
        converged: o.report.converged,
        iterations: o.report.iterations,
        tolerance: sc.settings.tol,
        residual_history: o.report.residual_history.clone(),
    }
}

/// Runs `sc`, writing artifacts and `report.json` into `out`.
pub fn run_scenario(sc: &Scenario, out: &Path, verbose: bool) -> cmfc::Result<RunReport> {
    std::fs::create_dir_all(out)?;
    let mut run = Run { out, verbose, timings: BTreeMap::new(), artifacts: Vec::new() };
    run.log(format!("mode {} scenario {}", sc.mode, sc.hash));
    let (cost, smp, convergence, details) = match sc.mode {
        Mode::LqUnconstrained | Mode::LqConstrained => {
            let o = if sc.mode == Mode::LqConstrained {
                run.timed("solve", || solve_constrained(&sc.model, &sc.settings))?
            } else {
                run.timed("solve", || solve_unconstrained(&sc.model, &sc.settings))?
            };
            run.emit_lq(sc, &o)?;
            (Some(o.report.cost), Some(o.report.smp.clone()), Some(lq_convergence(sc, &o)), lq_details(sc, &o))
        }
        Mode::Mfg => {
            let g = run.timed("solve", || mfg_solve(&sc.model, &sc.settings, sc.outer_iter, sc.outer_tol))?;
            run.emit_lq(sc, &g.inner)?;
            let mut d = lq_details(sc, &g.inner);
            d["consistency_tolerance"] = json!(sc.outer_tol);
            d["inner_converged"] = json!(g.inner.report.converged);
            let conv = Convergence {
                converged: g.converged,
                iterations: g.outer_iterations,
                tolerance: sc.outer_tol,
                residual_history: g.consistency_history.clone(),
            };
            (Some(g.inner.report.cost), Some(g.inner.report.smp.clone()), Some(conv), d)
        }
        Mode::Bridge => {
            let scenario = sc.deterministic()?;
            let table = run.timed("convergence_study", || convergence_study(&scenario, &sc.dt_list))?;
            for r in &table.rows {
                run.log(format!(
                    "dt={} left-node error={:.3e} right-node error={:.3e} transversality={:.3e}",
                    r.dt, r.sup_error, r.sup_error_right, r.transversality_error
                ));
            }
            run.emit("comparison.csv", |w| write_comparison(&table, w))?;
            let d = json!({
                "rows": table.rows,
                "slope": table.slope,
                "slope_band": [0.8, 1.2],
                "transversality_tolerance": 0.05,
            });
            (None, None, None, d)
        }
        Mode::FjSuite => {
            let outcomes = run.timed("fj_suite", run_toy_suite)?;
            let all_pass = outcomes.iter().all(|o| o.pass);
            for o in &outcomes {
                run.log(format!("{}: {}", o.name, if o.pass { "pass" } else { "FAIL" }));
            }
            let d = json!({
                "problems": outcomes,
                "all_pass": all_pass,
                "tolerances": {"stationarity": 1e-6, "slackness": 1e-8, "normalization": 1e-10},
            });
            (None, None, None, d)
        }
        Mode::MvsdeCheck => mvsde_check(sc, &mut run)?,
    };
    let mut report = RunReport {
        mode: sc.mode,
        scenario_hash: sc.hash.clone(),
        scenario: sc.clone(),
        timings: run.timings.clone(),
        cost,
        smp,
        convergence,
        details,
        artifacts: Vec::new(),
    };
    report.artifacts = run.artifacts.clone();
    report.artifacts.push(out.join("report.json"));
    run.emit("report.json", |w| write_json(&report, w))?;
    Ok(report)
}

type Outputs = (Option<CostEstimate>, Option<SmpReport>, Option<Convergence>, Value);

/// Forward simulation under the Riccati feedback, the Picard fixed point and
/// the derivative check of the cost.
fn mvsde_check(sc: &Scenario, run: &mut Run) -> cmfc::Result<Outputs> {
    let model = &sc.model;
    let s = &sc.settings;
    let riccati = riccati_solve(model, s.steps)?;
    let policy = ControlPolicy::feedback(move |k, _t, x, mx, out| out[0] = riccati.control(k, x[0], mx[0]));
    let setup = SimulationSetup {
        grid: TimeGrid::new(model.horizon, s.steps)?,
        particles: s.particles,
        seed: s.seed,
        initial: model.initial_law(),
    };
    let dynamics = model.dynamics();
    let cost_fn = model.cost();
    let ens = run.timed("simulate", || simulate_forward(&dynamics, &policy, &setup))?;
    let cost = cost_fn.evaluate(&ens);
    run.emit("paths.csv", |w| write_paths(&ens, sc.max_particles, w))?;
    run.emit("moments.csv", |w| write_moments(&ens, w))?;

    let picard_tol = 1e-12;
    let picard = run.timed("picard", || picard_iterate(&dynamics, &policy, &setup, s.max_iter, picard_tol))?;
    let distance = path_distance(&picard.ensemble, &ens);

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
    let direction: Vec<f64> =
        (0..ens.controls.len()).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let check = run.timed("derivative_check", || {
        directional_derivative_check(&dynamics, &cost_fn, &setup, &ens.controls, &direction, &[1e-3, 1e-4])
    })?;
    let details = json!({
        "riccati_value": riccati_solve(model, s.steps)?.value,
        "cost_ci_halfwidth": cost.ci_halfwidth,
        "picard_distance_to_direct": distance,
        "picard_distance_tolerance": 1e-10,
        "derivative_check": check,
        "derivative_tolerance": 1e-4,
        "all_pass": picard.converged && distance < 1e-10 && check.max_relative_error() < 1e-4,
    });
    let conv = Convergence {
        converged: picard.converged,
        iterations: picard.iterations,
        tolerance: picard_tol,
        residual_history: picard.log,
    };
    Ok((Some(cost), None, Some(conv), details))
}

//! Browser bindings: each operation takes scenario INI text and returns a
//! JSON string for the static page in `www/`. Errors come back as strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cmfc::bridge::convergence_study;
use cmfc::lq::{riccati_solve, solve_constrained, solve_unconstrained};
use cmfc::mvsde::empirical_moments;
use cmfc::scenario::{load, Scenario};

/// Largest particle count accepted in the browser (single-threaded).
pub const MAX_PARTICLES: usize = 20_000;

fn scenario(text: &str) -> Result<Scenario, String> {
    load(text, &[]).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Riccati coefficients of the unconstrained problem on the run grid:
/// `{times, beta, zeta, gamma, gain_fluctuation, gain_mean, value}`.
#[wasm_bindgen]
pub fn riccati(text: &str) -> Result<String, String> {
    let sc = scenario(text)?;
    let sol = riccati_solve(&sc.model, sc.settings.steps).map_err(|e| e.to_string())?;
    to_json(&sol)
}

#[derive(Serialize)]
struct SolveSummary {
    constrained: bool,
    times: Vec<f64>,
    mean_x: Vec<f64>,
    var_x: Vec<f64>,
    mean_a: Vec<f64>,
    cost: f64,
    ci_halfwidth: f64,
    riccati_value: Option<f64>,
    iterations: usize,
    converged: bool,
    smp_min_condition_residual: f64,
    active_fraction: f64,
}

/// Particle solve (constrained when the scenario has an active constraint):
/// per-step moments plus cost, convergence and SMP diagnostics.
#[wasm_bindgen]
pub fn solve(text: &str) -> Result<String, String> {
    let sc = scenario(text)?;
    if sc.settings.particles > MAX_PARTICLES {
        return Err(format!("run.N = {} exceeds the browser limit {MAX_PARTICLES}", sc.settings.particles));
    }
    let out = if sc.model.constrained {
        solve_constrained(&sc.model, &sc.settings)
    } else {
        solve_unconstrained(&sc.model, &sc.settings)
    }
    .map_err(|e| e.to_string())?;
    let ens = &out.ensemble;
    let steps = ens.grid.steps();
    let mut summary = SolveSummary {
        constrained: sc.model.constrained,
        times: (0..=steps).map(|k| ens.grid.t(k)).collect(),
        mean_x: Vec::with_capacity(steps + 1),
        var_x: Vec::with_capacity(steps + 1),
        mean_a: Vec::with_capacity(steps + 1),
        cost: out.report.cost.value,
        ci_halfwidth: out.report.cost.ci_halfwidth,
        riccati_value: out.report.reference_value,
        iterations: out.report.iterations,
        converged: out.report.converged,
        smp_min_condition_residual: out.report.smp.min_condition_residual,
        active_fraction: out.report.active_fraction,
    };
    for k in 0..=steps {
        let m = empirical_moments(ens, k).map_err(|e| e.to_string())?;
        summary.mean_x.push(m.mean_x[0]);
        summary.var_x.push(m.cov_x[0]);
        summary.mean_a.push(m.mean_a[0]);
    }
    to_json(&summary)
}

/// Discrete multipliers versus the continuous adjoint over `run.dt_list`:
/// `{rows: [{dt, sup_error, order_estimate, ...}], slope}`.
#[wasm_bindgen]
pub fn bridge(text: &str) -> Result<String, String> {
    let sc = scenario(text)?;
    let det = sc.deterministic().map_err(|e| e.to_string())?;
    let table = convergence_study(&det, &sc.dt_list).map_err(|e| e.to_string())?;
    to_json(&table)
}

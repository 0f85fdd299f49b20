//! Eight hand-analysed toy programs with known certificates and CQ verdicts.

use serde::Serialize;

use super::problem_file::{parse_problem, ProblemFile};
use super::{check_licq, check_mfcq, evaluate_fj_residual, recover_multipliers, brute_force_minimize, FjThresholds};
use crate::cones::BoxSet;
use crate::error::{Error, Result};

/// `(name, file contents)` of every toy problem.
pub const TOY_PROBLEMS: [(&str, &str); 8] = [
    ("linear_nonneg", include_str!("../../problems/t1_linear_nonneg.txt")),
    ("equality_circle", include_str!("../../problems/t2_equality_circle.txt")),
    ("abnormal_square", include_str!("../../problems/t3_abnormal_square.txt")),
    ("unconstrained", include_str!("../../problems/t4_unconstrained.txt")),
    ("duplicated", include_str!("../../problems/t5_duplicated.txt")),
    ("box_bound", include_str!("../../problems/t6_box_bound.txt")),
    ("disk", include_str!("../../problems/t7_disk.txt")),
    ("proportional_eq", include_str!("../../problems/t8_proportional_eq.txt")),
];

#[derive(Debug, Clone, Serialize)]
pub struct ToyOutcome {
    pub name: String,
    pub r0: f64,
    pub stationarity_residual: f64,
    pub max_slackness: f64,
    pub normalization_error: f64,
    pub licq: bool,
    pub mfcq: bool,
    pub verdicts_match: bool,
    pub r0_matches: bool,
    /// Objective at the brute-force grid optimum minus the stated optimum.
    pub brute_force_gap: Option<f64>,
    pub pass: bool,
}

/// Runs certificate recovery and CQ checks on one parsed problem.
pub fn run_problem(name: &str, pf: &ProblemFile) -> Result<ToyOutcome> {
    let x = pf
        .expect
        .point
        .clone()
        .ok_or_else(|| Error::MissingData(format!("{name}: [expect] point")))?;
    let rec = recover_multipliers(&pf.problem, &x)?;
    let report = evaluate_fj_residual(&pf.problem, &x, &rec.certificate, 1e-8)?;
    let licq = check_licq(&pf.problem, &x)?.licq;
    let mfcq = check_mfcq(&pf.problem, &x)?.mfcq;
    let verdicts_match = pf.expect.licq.is_none_or(|e| e == licq) && pf.expect.mfcq.is_none_or(|e| e == mfcq);
    let r0_matches = pf.expect.r0.is_none_or(|e| (e - rec.certificate.r0).abs() < 1e-8);

    let brute_force_gap = match pf.expect.search {
        Some((lo, hi)) => {
            let n = pf.problem.dim;
            let fs = &pf.problem.feasible_set;
            let lower: Vec<f64> = fs.lower().iter().map(|&l| l.max(lo)).collect();
            let upper: Vec<f64> = fs.upper().iter().map(|&u| u.min(hi)).collect();
            let boxed = pf.problem.clone().with_box(BoxSet::new(lower, upper)?);
            let res = pf.expect.resolution.unwrap_or(101);
            let xb = brute_force_minimize(&boxed, &vec![res; n], 0.0)?;
            let f = |p: &[f64]| (pf.problem.objective)(p).0;
            Some(f(&xb) - f(&x))
        }
        None => None,
    };
    let grid_ok = match (brute_force_gap, pf.expect.search) {
        (Some(gap), Some((lo, hi))) => {
            // The grid optimum is feasible, so it cannot beat the stated optimum,
            // and lies within a few grid cells of it in objective value.
            let h = (hi - lo) / (pf.expect.resolution.unwrap_or(101) as f64 - 1.0);
            let (_, grad) = (pf.problem.objective)(&x);
            let lip = 1.0 + grad.iter().map(|g| g.abs()).sum::<f64>();
            gap >= -1e-9 && gap <= 4.0 * h * lip
        }
        _ => true,
    };
    let th = FjThresholds::default();
    let pass = report.stationarity_residual < th.stationarity
        && report.max_slackness() < th.slackness
        && report.normalization_error < th.normalization
        && report.dual_violation <= th.dual
        && verdicts_match
        && r0_matches
        && grid_ok;
    Ok(ToyOutcome {
        name: name.to_string(),
        r0: rec.certificate.r0,
        stationarity_residual: report.stationarity_residual,
        max_slackness: report.max_slackness(),
        normalization_error: report.normalization_error,
        licq,
        mfcq,
        verdicts_match,
        r0_matches,
        brute_force_gap,
        pass,
    })
}

/// Runs the whole toy suite.
pub fn run_toy_suite() -> Result<Vec<ToyOutcome>> {
    TOY_PROBLEMS
        .iter()
        .map(|(name, text)| run_problem(name, &parse_problem(text)?))
        .collect()
}

//! Fritz-John / KKT machinery for finite-dimensional cone-constrained programs.
//!
//! The program is
//!
//! ```text
//! minimize f(x) over x in C (a box)
//! subject to g_i(x) <=_{K_i} 0   (i.e. -g_i(x) in K_i)
//!            h_j(x) = 0
//! ```
//!
//! A certificate `(r0, lambda, mu, xi)` satisfies the Fritz-John system when
//! `xi + r0 grad f + sum Dg_i^T lambda_i - sum Dh_j^T mu_j = 0`, with
//! `r0 >= 0`, `lambda_i in K_i+`, `<g_i, lambda_i> = 0`, `xi in N_C(x)` and
//! the multipliers normalized to unit total (1-norm per block).

pub mod problem_file;
pub mod toy_suite;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cones::{BoxSet, ConeSpec, NormalSign};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{nnls, null_space, numerical_rank};
use crate::lp::{maximize, LpOutcome};

/// `x -> (f(x), grad f(x))`.
pub type ObjectiveFn = Arc<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync>;
/// `x -> (value, Jacobian)`; the Jacobian has one row per output.
pub type MapFn = Arc<dyn Fn(&[f64]) -> (Vec<f64>, DMatrix<f64>) + Send + Sync>;

/// Relative band used to decide whether a constraint block is active.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Clone)]
pub struct InequalityBlock {
    pub map: MapFn,
    pub cone: ConeSpec,
}

/// A cone-constrained nonlinear program.
#[derive(Clone)]
pub struct NlpProblem {
    pub dim: usize,
    pub objective: ObjectiveFn,
    pub inequalities: Vec<InequalityBlock>,
    pub equalities: Vec<MapFn>,
    pub feasible_set: BoxSet,
    /// Number of leading coordinates forming `X1` in the CQ checks; 0 means all.
    pub split_index: usize,
}

impl std::fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NlpProblem")
            .field("dim", &self.dim)
            .field("inequalities", &self.inequalities.len())
            .field("equalities", &self.equalities.len())
            .field("feasible_set", &self.feasible_set)
            .field("split_index", &self.split_index)
            .finish()
    }
}

impl NlpProblem {
    pub fn new(dim: usize, objective: ObjectiveFn) -> Self {
        Self {
            dim,
            objective,
            inequalities: Vec::new(),
            equalities: Vec::new(),
            feasible_set: BoxSet::unbounded(dim),
            split_index: 0,
        }
    }

    pub fn with_inequality(mut self, map: MapFn, cone: ConeSpec) -> Self {
        self.inequalities.push(InequalityBlock { map, cone });
        self
    }

    pub fn with_equality(mut self, map: MapFn) -> Self {
        self.equalities.push(map);
        self
    }

    pub fn with_box(mut self, feasible_set: BoxSet) -> Self {
        self.feasible_set = feasible_set;
        self
    }

    pub fn with_split(mut self, split_index: usize) -> Self {
        self.split_index = split_index;
        self
    }

    fn split_cols(&self) -> usize {
        if self.split_index == 0 || self.split_index > self.dim {
            self.dim
        } else {
            self.split_index
        }
    }

    /// Evaluates every map at `x` and checks Jacobian shapes.
    pub fn evaluate(&self, x: &[f64]) -> Result<PointEvaluation> {
        check_dim("decision vector", self.dim, x.len())?;
        check_dim("feasible set", self.dim, self.feasible_set.dim())?;
        let (f, grad) = (self.objective)(x);
        check_dim("objective gradient", self.dim, grad.len())?;
        let mut ineq = Vec::with_capacity(self.inequalities.len());
        for block in &self.inequalities {
            let (v, j) = (block.map)(x);
            check_dim("inequality cone", block.cone.dim(), v.len())?;
            check_dim("inequality Jacobian rows", v.len(), j.nrows())?;
            check_dim("inequality Jacobian columns", self.dim, j.ncols())?;
            ineq.push((v, j));
        }
        let mut eq = Vec::with_capacity(self.equalities.len());
        for map in &self.equalities {
            let (v, j) = map(x);
            check_dim("equality Jacobian rows", v.len(), j.nrows())?;
            check_dim("equality Jacobian columns", self.dim, j.ncols())?;
            eq.push((v, j));
        }
        Ok(PointEvaluation {
            value: f,
            gradient: DVector::from_vec(grad),
            inequalities: ineq,
            equalities: eq,
        })
    }

    /// Errors with the first violated block when `x` is infeasible.
    pub fn check_feasible(&self, x: &[f64], tol: f64) -> Result<PointEvaluation> {
        let ev = self.evaluate(x)?;
        if !self.feasible_set.contains(x, tol) {
            return Err(Error::Infeasible(format!("x lies outside the box {:?}", self.feasible_set)));
        }
        for (i, ((v, _), block)) in ev.inequalities.iter().zip(&self.inequalities).enumerate() {
            let neg: Vec<f64> = v.iter().map(|a| -a).collect();
            let viol = block.cone.violation(&neg)?;
            if viol > tol * (1.0 + norm2(v)) {
                return Err(Error::Infeasible(format!(
                    "inequality block {i} violated by {viol:e}"
                )));
            }
        }
        for (j, (v, _)) in ev.equalities.iter().enumerate() {
            let viol = v.iter().map(|a| a.abs()).fold(0.0, f64::max);
            if viol > tol * (1.0 + norm2(v)) {
                return Err(Error::Infeasible(format!(
                    "equality block {j} violated by {viol:e}"
                )));
            }
        }
        Ok(ev)
    }

    /// Indices of inequality blocks whose value sits on the cone boundary.
    pub fn active_set(&self, ev: &PointEvaluation) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, ((v, _), block)) in ev.inequalities.iter().zip(&self.inequalities).enumerate() {
            let neg: Vec<f64> = v.iter().map(|a| -a).collect();
            let dist = block.cone.boundary_distance(&neg)?;
            if dist < ACTIVE_TOL * (1.0 + norm2(v)) {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Values and derivatives of all problem maps at one point.
#[derive(Debug, Clone)]
pub struct PointEvaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub inequalities: Vec<(Vec<f64>, DMatrix<f64>)>,
    pub equalities: Vec<(Vec<f64>, DMatrix<f64>)>,
}

/// Multiplier bundle of the Fritz-John system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FjCertificate {
    pub r0: f64,
    pub lambdas: Vec<Vec<f64>>,
    pub mus: Vec<Vec<f64>>,
    pub xi: Vec<f64>,
}

impl FjCertificate {
    /// `|r0| + sum ||lambda_i||_1 + sum ||mu_j||_1`.
    pub fn total_mass(&self) -> f64 {
        self.r0.abs()
            + self.lambdas.iter().map(|l| norm1(l)).sum::<f64>()
            + self.mus.iter().map(|m| norm1(m)).sum::<f64>()
    }

    /// Scales every multiplier (and `xi`) by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|a| a * factor).collect::<Vec<_>>();
        Self {
            r0: self.r0 * factor,
            lambdas: self.lambdas.iter().map(s).collect(),
            mus: self.mus.iter().map(s).collect(),
            xi: s(&self.xi),
        }
    }

    /// Rescaled to unit total mass.
    pub fn normalized(&self) -> Result<Self> {
        let t = self.total_mass();
        if t == 0.0 || !t.is_finite() {
            return Err(Error::InvalidInput("certificate has no nonzero multiplier".into()));
        }
        Ok(self.scaled(1.0 / t))
    }
}

/// Residuals of a certificate at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FjResidualReport {
    pub stationarity_residual: f64,
    pub slackness_residuals: Vec<f64>,
    /// Worst violation among `r0 >= 0`, `lambda_i in K_i+` and `xi in N_C(x)`.
    pub dual_violation: f64,
    pub dual_feasible: bool,
    pub normalization_error: f64,
}

impl FjResidualReport {
    pub fn max_slackness(&self) -> f64 {
        self.slackness_residuals.iter().cloned().fold(0.0, f64::max)
    }
}

/// Residual thresholds used to accept a certificate.
#[derive(Debug, Clone, Copy)]
pub struct FjThresholds {
    pub stationarity: f64,
    pub slackness: f64,
    pub normalization: f64,
    pub dual: f64,
}

impl Default for FjThresholds {
    fn default() -> Self {
        Self {
            stationarity: 1e-6,
            slackness: 1e-8,
            normalization: 1e-10,
            dual: 1e-10,
        }
    }
}

impl FjThresholds {
    pub fn accepts(&self, r: &FjResidualReport) -> bool {
        r.stationarity_residual < self.stationarity
            && r.max_slackness() < self.slackness
            && r.normalization_error < self.normalization
            && r.dual_violation <= self.dual
    }
}

fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Stationarity vector `xi + r0 grad f + sum Dg^T lambda - sum Dh^T mu`.
fn stationarity_vector(ev: &PointEvaluation, cert: &FjCertificate) -> DVector<f64> {
    let mut v = &ev.gradient * cert.r0;
    for ((_, jac), lam) in ev.inequalities.iter().zip(&cert.lambdas) {
        v += jac.transpose() * DVector::from_column_slice(lam);
    }
    for ((_, jac), mu) in ev.equalities.iter().zip(&cert.mus) {
        v -= jac.transpose() * DVector::from_column_slice(mu);
    }
    v + DVector::from_column_slice(&cert.xi)
}

/// Evaluates every Fritz-John residual of `cert` at `x_hat`.
pub fn evaluate_fj_residual(
    problem: &NlpProblem,
    x_hat: &[f64],
    cert: &FjCertificate,
    tol: f64,
) -> Result<FjResidualReport> {
    let ev = problem.check_feasible(x_hat, tol)?;
    check_dim("certificate lambdas", problem.inequalities.len(), cert.lambdas.len())?;
    check_dim("certificate mus", problem.equalities.len(), cert.mus.len())?;
    check_dim("certificate xi", problem.dim, cert.xi.len())?;
    for (lam, (v, _)) in cert.lambdas.iter().zip(&ev.inequalities) {
        check_dim("lambda block", v.len(), lam.len())?;
    }
    for (mu, (v, _)) in cert.mus.iter().zip(&ev.equalities) {
        check_dim("mu block", v.len(), mu.len())?;
    }

    let stationarity_residual = stationarity_vector(&ev, cert).norm();
    let slackness_residuals = ev
        .inequalities
        .iter()
        .zip(&cert.lambdas)
        .map(|((g, _), lam)| g.iter().zip(lam).map(|(a, b)| a * b).sum::<f64>().abs())
        .collect();

    let mut dual_violation = (-cert.r0).max(0.0);
    for (block, lam) in problem.inequalities.iter().zip(&cert.lambdas) {
        let g = block.cone.generator_matrix();
        let l = DVector::from_column_slice(lam);
        for col in g.column_iter() {
            dual_violation = dual_violation.max(-col.dot(&l) / col.norm());
        }
    }
    let nc = problem.feasible_set.normal_cone_residual(&problem.feasible_set.project(x_hat), &cert.xi)?;
    dual_violation = dual_violation.max(nc);

    Ok(FjResidualReport {
        stationarity_residual,
        slackness_residuals,
        dual_violation,
        dual_feasible: dual_violation <= tol,
        normalization_error: (cert.total_mass() - 1.0).abs(),
    })
}

/// Result of [`recover_multipliers`].
#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub certificate: FjCertificate,
    pub stationarity_residual: f64,
    /// True when the certificate came from the normal (r0 > 0) branch.
    pub normal: bool,
}

/// Column bookkeeping for the multiplier least-squares problems.
enum Var {
    Lambda { block: usize, dir: DVector<f64> },
    Mu { block: usize, row: usize, sign: f64 },
    Xi { coord: usize, sign: f64 },
}

/// Recovers a normalized Fritz-John certificate at a (feasible) point.
///
/// First tries the normal branch `r0 = 1` as a sign-constrained least-squares
/// problem; when that cannot annihilate the stationarity vector the abnormal
/// branch `r0 = 0` is solved on the unit simplex of multiplier mass.
pub fn recover_multipliers(problem: &NlpProblem, x_hat: &[f64]) -> Result<Recovery> {
    let tol = 1e-8;
    let ev = problem.check_feasible(x_hat, tol)?;
    let n = problem.dim;
    let x_proj = problem.feasible_set.project(x_hat);

    let mut vars: Vec<Var> = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut free: Vec<bool> = Vec::new();
    let mut mass: Vec<f64> = Vec::new();

    for (i, ((g, jac), block)) in ev.inequalities.iter().zip(&problem.inequalities).enumerate() {
        let gv = DVector::from_column_slice(g);
        let band = ACTIVE_TOL * (1.0 + gv.norm());
        let dual = block.cone.dual_generator_matrix();
        for d in dual.column_iter() {
            // Complementarity: only dual generators orthogonal to -g_i.
            if (d.dot(&gv)).abs() <= band * d.norm() {
                let dir = d.into_owned();
                cols.push(jac.transpose() * &dir);
                mass.push(norm1(dir.as_slice()));
                free.push(false);
                vars.push(Var::Lambda { block: i, dir });
            }
        }
    }
    for (j, (_, jac)) in ev.equalities.iter().enumerate() {
        for row in 0..jac.nrows() {
            for sign in [1.0, -1.0] {
                cols.push(-jac.row(row).transpose() * sign);
                mass.push(1.0);
                free.push(false);
                vars.push(Var::Mu { block: j, row, sign });
            }
        }
    }
    for (coord, s) in problem.feasible_set.normal_signs(&x_proj, tol).into_iter().enumerate() {
        let signs: &[f64] = match s {
            NormalSign::Zero => &[],
            NormalSign::NonPositive => &[-1.0],
            NormalSign::NonNegative => &[1.0],
            NormalSign::Free => &[1.0, -1.0],
        };
        for &sign in signs {
            let mut e = DVector::zeros(n);
            e[coord] = sign;
            cols.push(e);
            mass.push(0.0);
            free.push(false);
            vars.push(Var::Xi { coord, sign });
        }
    }

    let a = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let grad = &ev.gradient;
    let scale = 1.0 + grad.norm();

    let assemble = |r0: f64, theta: &DVector<f64>| -> FjCertificate {
        let mut cert = FjCertificate {
            r0,
            lambdas: ev.inequalities.iter().map(|(g, _)| vec![0.0; g.len()]).collect(),
            mus: ev.equalities.iter().map(|(h, _)| vec![0.0; h.len()]).collect(),
            xi: vec![0.0; n],
        };
        for (k, var) in vars.iter().enumerate() {
            let t = theta[k];
            if t == 0.0 {
                continue;
            }
            match var {
                Var::Lambda { block, dir } => {
                    for (l, d) in cert.lambdas[*block].iter_mut().zip(dir.iter()) {
                        *l += t * d;
                    }
                }
                Var::Mu { block, row, sign } => cert.mus[*block][*row] += t * sign,
                Var::Xi { coord, sign } => cert.xi[*coord] += t * sign,
            }
        }
        cert
    };

    // Normal branch: r0 = 1.
    let (theta, _) = nnls(&a, &(-grad), &free);
    let cert = assemble(1.0, &theta);
    let normal_res = stationarity_vector(&ev, &cert).norm();
    if normal_res <= 1e-9 * scale {
        let cert = cert.normalized()?;
        let res = stationarity_vector(&ev, &cert).norm();
        return Ok(Recovery {
            certificate: cert,
            stationarity_residual: res,
            normal: true,
        });
    }

    // Abnormal branch: r0 = 0 with unit multiplier mass.
    let has_mass = mass.iter().any(|&m| m > 0.0);
    if !has_mass {
        // Nothing can carry the normalization: return the best normal certificate.
        let cert = cert.normalized()?;
        let res = stationarity_vector(&ev, &cert).norm();
        return Ok(Recovery {
            certificate: cert,
            stationarity_residual: res,
            normal: true,
        });
    }
    let constraint_cols_zero = vars
        .iter()
        .zip(&cols)
        .filter(|(v, _)| !matches!(v, Var::Xi { .. }))
        .all(|(_, c)| c.amax() == 0.0);
    let theta = if constraint_cols_zero {
        // Degenerate Jacobians: all mass on the first active generator.
        let mut t = DVector::zeros(vars.len());
        if let Some(k) = vars.iter().position(|v| matches!(v, Var::Lambda { .. })) {
            t[k] = 1.0 / mass[k];
        } else if let Some(k) = mass.iter().position(|&m| m > 0.0) {
            t[k] = 1.0 / mass[k];
        }
        t
    } else {
        let rho = 1e4 * (1.0 + a.amax());
        let mut aug = DMatrix::zeros(n + 1, vars.len());
        aug.view_mut((0, 0), (n, vars.len())).copy_from(&a);
        for k in 0..vars.len() {
            aug[(n, k)] = rho * mass[k];
        }
        let mut rhs = DVector::zeros(n + 1);
        rhs[n] = rho;
        nnls(&aug, &rhs, &vec![false; vars.len()]).0
    };
    let abnormal = assemble(0.0, &theta);
    let abnormal = abnormal.normalized()?;
    let abnormal_res = stationarity_vector(&ev, &abnormal).norm();

    let normal_cert = cert.normalized()?;
    let normal_res = stationarity_vector(&ev, &normal_cert).norm();
    if abnormal_res < normal_res {
        Ok(Recovery {
            certificate: abnormal,
            stationarity_residual: abnormal_res,
            normal: false,
        })
    } else {
        Ok(Recovery {
            certificate: normal_cert,
            stationarity_residual: normal_res,
            normal: true,
        })
    }
}

/// Constraint-qualification verdicts at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CqReport {
    pub licq: bool,
    /// Rank of the stacked active Jacobian restricted to `X1`.
    pub licq_rank: usize,
    /// Number of rows that rank must reach.
    pub licq_rows: usize,
    pub mfcq: bool,
    /// Point `c in C` giving a strictly feasible linearized direction.
    pub mfcq_witness: Option<Vec<f64>>,
    pub active_set: Vec<usize>,
}

fn stacked_rows(
    problem: &NlpProblem,
    ev: &PointEvaluation,
    active: &[usize],
    with_ineq: bool,
) -> DMatrix<f64> {
    let cols = problem.split_cols();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    if with_ineq {
        for &i in active {
            let jac = &ev.inequalities[i].1;
            for r in 0..jac.nrows() {
                rows.push((0..cols).map(|c| jac[(r, c)]).collect());
            }
        }
    }
    for (_, jac) in &ev.equalities {
        for r in 0..jac.nrows() {
            rows.push((0..cols).map(|c| jac[(r, c)]).collect());
        }
    }
    let mut m = DMatrix::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

fn full_row_rank(m: &DMatrix<f64>) -> (bool, usize) {
    if m.nrows() == 0 {
        return (true, 0);
    }
    let rank = numerical_rank(m, 1e-8);
    (rank == m.nrows(), rank)
}

/// LICQ: stacked active-inequality and equality Jacobians (restricted to
/// the first `split_index` coordinates) have full row rank.
pub fn check_licq(problem: &NlpProblem, x_hat: &[f64]) -> Result<CqReport> {
    let ev = problem.evaluate(x_hat)?;
    let active = problem.active_set(&ev)?;
    let m = stacked_rows(problem, &ev, &active, true);
    let (licq, rank) = full_row_rank(&m);
    Ok(CqReport {
        licq,
        licq_rank: rank,
        licq_rows: m.nrows(),
        mfcq: false,
        mfcq_witness: None,
        active_set: active,
    })
}

/// MFCQ: surjective equality Jacobian plus a point `c in C` with
/// `Dg_i(x)(c - x)` in `-int K_i` for active `i` and `Dh_j(x)(c - x) = 0`.
pub fn check_mfcq(problem: &NlpProblem, x_hat: &[f64]) -> Result<CqReport> {
    let ev = problem.evaluate(x_hat)?;
    let active = problem.active_set(&ev)?;
    let eq_rows = stacked_rows(problem, &ev, &active, false);
    let (surjective, rank) = full_row_rank(&eq_rows);
    let mut report = CqReport {
        licq: false,
        licq_rank: rank,
        licq_rows: eq_rows.nrows(),
        mfcq: false,
        mfcq_witness: None,
        active_set: active.clone(),
    };
    let licq = check_licq(problem, x_hat)?;
    report.licq = licq.licq;
    if !surjective {
        return Ok(report);
    }
    for &i in &active {
        if !problem.inequalities[i].cone.is_solid() {
            return Ok(report);
        }
    }

    // Directions d = N z with N spanning ker(Dh) in the full space.
    let n = problem.dim;
    let mut heq: Vec<DVector<f64>> = Vec::new();
    for (_, jac) in &ev.equalities {
        for r in 0..jac.nrows() {
            heq.push(jac.row(r).transpose());
        }
    }
    let basis = if heq.is_empty() {
        DMatrix::identity(n, n)
    } else {
        let hm = DMatrix::from_columns(&heq).transpose();
        null_space(&hm, 1e-10)
    };
    let p = basis.ncols();
    if p == 0 {
        // Only d = 0 is allowed; strictness needs no active inequality.
        if active.is_empty() {
            report.mfcq = true;
            report.mfcq_witness = Some(x_hat.to_vec());
        }
        return Ok(report);
    }
    if active.is_empty() {
        report.mfcq = true;
        report.mfcq_witness = Some(x_hat.to_vec());
        return Ok(report);
    }

    // LP in (z+, z-, s): maximize s subject to
    //   s*||d_k|| - <d_k, -Dg_i N z> <= 0 for each dual generator d_k,
    //   box rows on N z, and |z| <= 1 (via z+, z- <= 1), s <= 1.
    let nv = 2 * p + 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for &i in &active {
        let jac = &ev.inequalities[i].1;
        let jn = jac * &basis; // rows x p
        let dual = problem.inequalities[i].cone.dual_generator_matrix();
        for d in dual.column_iter() {
            // <d, -J N z> >= s ||d||
            let coef = -(jn.transpose() * d); // p
            let mut row = vec![0.0; nv];
            for k in 0..p {
                row[k] = -coef[k];
                row[p + k] = coef[k];
            }
            row[2 * p] = d.norm();
            rows.push(row);
            rhs.push(0.0);
        }
    }
    let x_proj = problem.feasible_set.project(x_hat);
    for c in 0..n {
        let lo = problem.feasible_set.lower()[c] - x_proj[c];
        let hi = problem.feasible_set.upper()[c] - x_proj[c];
        let nrow = basis.row(c);
        if hi.is_finite() {
            let mut row = vec![0.0; nv];
            for k in 0..p {
                row[k] = nrow[k];
                row[p + k] = -nrow[k];
            }
            rows.push(row);
            rhs.push(hi);
        }
        if lo.is_finite() {
            let mut row = vec![0.0; nv];
            for k in 0..p {
                row[k] = -nrow[k];
                row[p + k] = nrow[k];
            }
            rows.push(row);
            rhs.push(-lo);
        }
    }
    for k in 0..nv {
        let mut row = vec![0.0; nv];
        row[k] = 1.0;
        rows.push(row);
        rhs.push(1.0);
    }
    let a = DMatrix::from_fn(rows.len(), nv, |i, j| rows[i][j]);
    let b = DVector::from_vec(rhs);
    let mut c = DVector::zeros(nv);
    c[2 * p] = 1.0;
    if let LpOutcome::Optimal { x, value } = maximize(&c, &a, &b) {
        if value > 1e-9 {
            let z = DVector::from_fn(p, |k, _| x[k] - x[p + k]);
            let d = &basis * z;
            report.mfcq = true;
            report.mfcq_witness = Some(x_proj.iter().zip(d.iter()).map(|(a, b)| a + b).collect());
        }
    }
    Ok(report)
}

/// Outcome of [`check_kkt`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktVerdict {
    pub holds: bool,
    /// The certificate rescaled to `r0 = 1` when `holds`.
    pub rescaled: Option<FjCertificate>,
}

/// KKT holds when the certificate passes every residual threshold and
/// `r0 > 0`; the certificate is then rescaled to `r0 = 1`.
pub fn check_kkt(problem: &NlpProblem, x_hat: &[f64], cert: &FjCertificate) -> Result<KktVerdict> {
    let th = FjThresholds::default();
    let report = evaluate_fj_residual(problem, x_hat, cert, 1e-8)?;
    if !th.accepts(&report) || cert.r0 <= 1e-12 {
        return Ok(KktVerdict {
            holds: false,
            rescaled: None,
        });
    }
    Ok(KktVerdict {
        holds: true,
        rescaled: Some(cert.scaled(1.0 / cert.r0)),
    })
}

/// Grid search over the (bounded) box; returns the best feasible grid point.
///
/// A grid point is feasible when every inequality block violates its cone by
/// at most `tol` and every equality residual is at most `tol`.
pub fn brute_force_minimize(problem: &NlpProblem, resolution: &[usize], tol: f64) -> Result<Vec<f64>> {
    let n = problem.dim;
    if n > 4 {
        return Err(Error::InvalidInput(format!("brute force limited to dim <= 4, got {n}")));
    }
    check_dim("grid resolution", n, resolution.len())?;
    if !problem.feasible_set.is_bounded() {
        return Err(Error::InvalidInput("brute force needs a bounded box".into()));
    }
    if resolution.contains(&0) {
        return Err(Error::InvalidInput("grid resolution must be positive".into()));
    }
    let lo = problem.feasible_set.lower();
    let hi = problem.feasible_set.upper();
    let axis = |d: usize, k: usize| -> f64 {
        if resolution[d] == 1 {
            0.5 * (lo[d] + hi[d])
        } else {
            lo[d] + (hi[d] - lo[d]) * k as f64 / (resolution[d] - 1) as f64
        }
    };
    let total: usize = resolution.iter().product();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut x = vec![0.0; n];
    for flat in 0..total {
        let mut rem = flat;
        for d in 0..n {
            x[d] = axis(d, rem % resolution[d]);
            rem /= resolution[d];
        }
        let mut ok = true;
        for block in &problem.inequalities {
            let (v, _) = (block.map)(&x);
            let neg: Vec<f64> = v.iter().map(|a| -a).collect();
            if block.cone.violation(&neg)? > tol {
                ok = false;
                break;
            }
        }
        if ok {
            for map in &problem.equalities {
                let (v, _) = map(&x);
                if v.iter().any(|a| a.abs() > tol) {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let (f, _) = (problem.objective)(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x.clone()));
        }
    }
    best.map(|(_, x)| x)
        .ok_or_else(|| Error::EmptyFeasibleSet(format!("no feasible point on a {total}-point grid")))
}

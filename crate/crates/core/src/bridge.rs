//! Deterministic instances of the control problem lowered to finite
//! cone-constrained programs, and the comparison of the recovered multipliers
//! of the dynamics equalities with the continuous adjoint.
//!
//! The scenario is scalar: `dx = (a x + c u) dt`, cost
//! `int (q x^2 + v u^2)/2 dt + ell x_T^2 / 2 + r x_T`, optional constraint
//! `h(t) x - u >= 0`. Its Euler transcription has decision vector
//! `(x_0..x_M, u_0..u_{M-1})`, dynamics rows
//! `x_{k+1} - x_k - dt (a x_k + c u_k) = 0`, the pin `x_0 = x0` and, when
//! constrained, one orthant block `u_k - h_k x_k <= 0`.
//!
//! With the Fritz-John sign convention of [`crate::fj`] the multiplier of
//! dynamics row `k` solves the discrete adjoint recursion
//! `mu_k = (1 + a dt) mu_{k+1} + dt (q x_{k+1} - h lambda_{k+1}/dt)`,
//! `mu_{M-1} = ell x_M + r`, and is matched to the adjoint at the left node
//! `t_k`.

#[cfg(test)]
mod tests;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cones::ConeSpec;
use crate::error::{Error, Result};
use crate::fj::{recover_multipliers, FjCertificate, MapFn, NlpProblem, ObjectiveFn, Recovery};
use crate::linalg::nnls;
use crate::lq::{LqModel, Slope};
use crate::par;

/// Scalar deterministic linear-quadratic scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeterministicLq {
    pub a: f64,
    pub c: f64,
    pub q: f64,
    pub v: f64,
    pub ell: f64,
    /// Linear terminal weight `r`.
    pub terminal_slope: f64,
    pub x0: f64,
    pub horizon: f64,
    /// Constraint slope; `None` means unconstrained.
    pub h: Option<Slope>,
}

impl DeterministicLq {
    /// `a = -0.3, c = 1, q = v = ell = 1, x0 = 1, T = 1`.
    pub fn benchmark() -> Self {
        Self {
            a: -0.3,
            c: 1.0,
            q: 1.0,
            v: 1.0,
            ell: 1.0,
            terminal_slope: 0.0,
            x0: 1.0,
            horizon: 1.0,
            h: None,
        }
    }

    /// Restriction of the mean-field model to a point-mass initial law with
    /// no noise: `E[X] = X`, so drifts merge (`a = b1 + b2`, `c = b3 + b4`)
    /// and the centered terminal penalty vanishes.
    pub fn from_model(model: &LqModel) -> Result<Self> {
        if model.s.iter().any(|s| *s != 0.0) || model.v0 != 0.0 {
            return Err(Error::InvalidInput(
                "stochastic scenario: the discrete bridge needs zero diffusion and a point-mass initial law".into(),
            ));
        }
        Ok(Self {
            a: model.b[0] + model.b[1],
            c: model.b[2] + model.b[3],
            q: model.q,
            v: model.v,
            ell: 0.0,
            terminal_slope: 0.0,
            x0: model.m0,
            horizon: model.horizon,
            h: model.constrained.then(|| model.h.clone()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.c, self.q, self.v, self.ell, self.terminal_slope, self.x0, self.horizon];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite scenario coefficient".into()));
        }
        if self.v <= 0.0 || self.q < 0.0 || self.ell < 0.0 || self.horizon <= 0.0 {
            return Err(Error::InvalidInput("need v > 0, q >= 0, ell >= 0, T > 0".into()));
        }
        Ok(())
    }

    fn slope(&self, t: f64) -> Option<f64> {
        self.h.as_ref().map(|h| h.at(t))
    }
}

/// The transcribed program together with its layout.
#[derive(Debug, Clone)]
pub struct DiscreteControlProblem {
    pub scenario: DeterministicLq,
    pub steps: usize,
    pub dt: f64,
    pub nlp: NlpProblem,
}

/// Steps of a grid with spacing `dt` on `[0, horizon]`.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    let f = horizon / dt;
    let m = f.round() as usize;
    if !(dt > 0.0) || m == 0 || (f - m as f64).abs() > 1e-9 * f.max(1.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} does not divide the horizon {horizon}")));
    }
    Ok(m)
}

/// Lowers the scenario to an [`NlpProblem`] on `steps` Euler steps.
pub fn discretize(scenario: &DeterministicLq, steps: usize) -> Result<DiscreteControlProblem> {
    scenario.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let m = steps;
    let dim = 2 * m + 1;
    let dt = scenario.horizon / m as f64;
    let s = scenario.clone();

    let (q, v, ell, r) = (s.q, s.v, s.ell, s.terminal_slope);
    let objective: ObjectiveFn = Arc::new(move |z: &[f64]| {
        let mut grad = vec![0.0; dim];
        let mut f = 0.0;
        for k in 0..m {
            let (x, u) = (z[k], z[m + 1 + k]);
            f += 0.5 * dt * (q * x * x + v * u * u);
            grad[k] = dt * q * x;
            grad[m + 1 + k] = dt * v * u;
        }
        let xt = z[m];
        f += 0.5 * ell * xt * xt + r * xt;
        grad[m] = ell * xt + r;
        (f, grad)
    });

    let (a, c) = (s.a, s.c);
    let dynamics: MapFn = Arc::new(move |z: &[f64]| {
        let mut val = vec![0.0; m];
        let mut jac = DMatrix::zeros(m, dim);
        for k in 0..m {
            val[k] = z[k + 1] - z[k] - dt * (a * z[k] + c * z[m + 1 + k]);
            jac[(k, k + 1)] = 1.0;
            jac[(k, k)] = -(1.0 + a * dt);
            jac[(k, m + 1 + k)] = -c * dt;
        }
        (val, jac)
    });
    let x0 = s.x0;
    let pin: MapFn = Arc::new(move |z: &[f64]| {
        let mut jac = DMatrix::zeros(1, dim);
        jac[(0, 0)] = 1.0;
        (vec![z[0] - x0], jac)
    });

    let mut nlp = NlpProblem::new(dim, objective).with_equality(dynamics).with_equality(pin);
    if s.h.is_some() {
        let h: Vec<f64> = (0..m).map(|k| s.slope(k as f64 * dt).unwrap_or(0.0)).collect();
        let path: MapFn = Arc::new(move |z: &[f64]| {
            let mut val = vec![0.0; m];
            let mut jac = DMatrix::zeros(m, dim);
            for k in 0..m {
                val[k] = z[m + 1 + k] - h[k] * z[k];
                jac[(k, m + 1 + k)] = 1.0;
                jac[(k, k)] = -h[k];
            }
            (val, jac)
        });
        nlp = nlp.with_inequality(path, ConeSpec::orthant(m)?);
    }
    Ok(DiscreteControlProblem { scenario: s, steps: m, dt, nlp })
}

/// Exact optimum of the transcribed program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteSolution {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub value: f64,
    /// Inequality multipliers from the solve (`u_k - h_k x_k <= 0`), empty if unconstrained.
    pub lambda: Vec<f64>,
}

impl DiscreteSolution {
    /// Decision vector `(x_0..x_M, u_0..u_{M-1})`.
    pub fn decision(&self) -> Vec<f64> {
        self.x.iter().chain(&self.u).copied().collect()
    }
}

impl DiscreteControlProblem {
    /// `x = S u + s0` for the Euler recursion.
    fn condensed_states(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (m, dt) = (self.steps, self.dt);
        let phi = 1.0 + self.scenario.a * dt;
        let mut sm = DMatrix::zeros(m + 1, m);
        let mut s0 = DVector::zeros(m + 1);
        s0[0] = self.scenario.x0;
        for k in 0..m {
            s0[k + 1] = phi * s0[k];
            for j in 0..k {
                sm[(k + 1, j)] = phi * sm[(k, j)];
            }
            sm[(k + 1, k)] = self.scenario.c * dt;
        }
        (sm, s0)
    }

    fn rollout(&self, u: &[f64]) -> Vec<f64> {
        let mut x = vec![self.scenario.x0; self.steps + 1];
        for k in 0..self.steps {
            x[k + 1] = x[k] + self.dt * (self.scenario.a * x[k] + self.scenario.c * u[k]);
        }
        x
    }

    /// Solves the convex QP exactly: a Cholesky solve of the condensed
    /// problem when unconstrained, otherwise the dual (a nonnegative
    /// least-squares problem) solved by an active-set method.
    pub fn solve(&self) -> Result<DiscreteSolution> {
        let (m, dt) = (self.steps, self.dt);
        let s = &self.scenario;
        let (sm, s0) = self.condensed_states();
        let mut qx = DVector::from_element(m + 1, s.q * dt);
        qx[m] = s.ell;
        let qs = DMatrix::from_fn(m + 1, m, |i, j| qx[i] * sm[(i, j)]);
        let p = sm.transpose() * &qs + DMatrix::identity(m, m) * (s.v * dt);
        let mut lin = qs.transpose() * &s0;
        for j in 0..m {
            lin[j] += s.terminal_slope * sm[(m, j)];
        }
        let chol = p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("condensed Hessian is not positive definite".into()))?;

        let (u, lambda) = match &s.h {
            None => (-chol.solve(&lin), Vec::new()),
            Some(_) => {
                // G u <= d with G_k = e_k - h_k S_k, d_k = h_k s0_k.
                let h: Vec<f64> = (0..m).map(|k| s.slope(k as f64 * dt).unwrap_or(0.0)).collect();
                let g = DMatrix::from_fn(m, m, |k, j| if k == j { 1.0 } else { 0.0 } - h[k] * sm[(k, j)]);
                let d = DVector::from_fn(m, |k, _| h[k] * s0[k]);
                // Dual: min 1/2 |B l|^2 + l.rhs over l >= 0, B = L^-1 G^T.
                let l = chol.l();
                let b = l
                    .solve_lower_triangular(&g.transpose())
                    .ok_or_else(|| Error::InvalidInput("singular Cholesky factor".into()))?;
                let rhs = &g * chol.solve(&lin) + &d;
                let target = b
                    .transpose()
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::InvalidInput("singular constraint Jacobian".into()))?;
                let (lam, _) = nnls(&b, &(-target), &vec![false; m]);
                let u = -chol.solve(&(&lin + g.transpose() * &lam));
                (u, lam.iter().copied().collect())
            }
        };
        let u: Vec<f64> = u.iter().copied().collect();
        let x = self.rollout(&u);
        let z: Vec<f64> = x.iter().chain(&u).copied().collect();
        let value = (self.nlp.objective)(&z).0;
        Ok(DiscreteSolution { x, u, value, lambda })
    }

    /// Fritz-John certificate recovered at `solution` by the generic solver.
    pub fn certificate(&self, solution: &DiscreteSolution) -> Result<Recovery> {
        recover_multipliers(&self.nlp, &solution.decision())
    }
}

/// Continuous optimal solution sampled at the grid nodes `t_0..t_M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointReference {
    pub times: Vec<f64>,
    pub state: Vec<f64>,
    pub adjoint: Vec<f64>,
    /// Constraint multiplier density on nodes `0..M-1`.
    pub eta: Vec<f64>,
}

/// Minimum number of fine substeps per unit time for the references.
const FINE_RICCATI: usize = 4000;
const FINE_SWEEP: usize = 40000;

/// The continuous optimum and its adjoint `p` on `steps` coarse nodes.
///
/// Unconstrained: `p = beta x + phi` with `beta' = -2 a beta - q + c^2 beta^2 / v`,
/// `phi' = (c^2 beta / v - a) phi`, `beta_T = ell`, `phi_T = r`, integrated by
/// RK4 on a fine grid. Constrained: a damped forward-backward sweep of the
/// optimality system on a fine Euler grid.
pub fn adjoint_reference(scenario: &DeterministicLq, steps: usize) -> Result<AdjointReference> {
    scenario.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    match scenario.h {
        None => riccati_reference(scenario, steps),
        Some(_) => sweep_reference(scenario, steps),
    }
}

fn riccati_reference(s: &DeterministicLq, steps: usize) -> Result<AdjointReference> {
    let sub = FINE_RICCATI.div_ceil(steps).max(1);
    let fine = steps * sub;
    let h = s.horizon / fine as f64;
    let k2 = s.c * s.c / s.v;
    // beta, phi on the half-step grid (2 fine + 1 nodes).
    let half = 2 * fine;
    let hh = h / 2.0;
    let mut beta = vec![0.0; half + 1];
    let mut phi = vec![0.0; half + 1];
    beta[half] = s.ell;
    phi[half] = s.terminal_slope;
    let rhs = |b: f64, p: f64| (-2.0 * s.a * b - s.q + k2 * b * b, (k2 * b - s.a) * p);
    for j in (0..half).rev() {
        let (b, p) = (beta[j + 1], phi[j + 1]);
        let step = -hh;
        let (a1, c1) = rhs(b, p);
        let (a2, c2) = rhs(b + 0.5 * step * a1, p + 0.5 * step * c1);
        let (a3, c3) = rhs(b + 0.5 * step * a2, p + 0.5 * step * c2);
        let (a4, c4) = rhs(b + step * a3, p + step * c3);
        beta[j] = b + step / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        phi[j] = p + step / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        if !beta[j].is_finite() || beta[j].abs() > 1e8 {
            return Err(Error::RiccatiBlowup { time: j as f64 * hh });
        }
    }
    let drift = |x: f64, j: usize| (s.a - k2 * beta[j]) * x - k2 * phi[j];
    let mut x = vec![0.0; fine + 1];
    x[0] = s.x0;
    for j in 0..fine {
        let (x0, i) = (x[j], 2 * j);
        let a1 = drift(x0, i);
        let a2 = drift(x0 + 0.5 * h * a1, i + 1);
        let a3 = drift(x0 + 0.5 * h * a2, i + 1);
        let a4 = drift(x0 + h * a3, i + 2);
        x[j + 1] = x0 + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    }
    let nodes = |k: usize| k * sub;
    Ok(AdjointReference {
        times: (0..=steps).map(|k| s.horizon * k as f64 / steps as f64).collect(),
        state: (0..=steps).map(|k| x[nodes(k)]).collect(),
        adjoint: (0..=steps).map(|k| beta[2 * nodes(k)] * x[nodes(k)] + phi[2 * nodes(k)]).collect(),
        eta: vec![0.0; steps],
    })
}

fn sweep_reference(s: &DeterministicLq, steps: usize) -> Result<AdjointReference> {
    let sub = ((FINE_SWEEP as f64 * s.horizon).ceil() as usize).div_ceil(steps).max(1);
    let fine = steps * sub;
    let h = s.horizon / fine as f64;
    let slope: Vec<f64> = (0..=fine).map(|j| s.slope(j as f64 * h).unwrap_or(0.0)).collect();
    // Bound on the Lipschitz constant of u -> -c p(u) / v.
    let growth = (2.0 * s.a.abs() * s.horizon).exp();
    let lip = s.c * s.c / s.v * (s.ell * s.horizon + s.q * s.horizon * s.horizon) * growth;
    let damping = 1.0 / (1.0 + lip);

    let mut u = vec![0.0; fine];
    let mut x = vec![0.0; fine + 1];
    let mut mu = vec![0.0; fine];
    let mut eta = vec![0.0; fine];
    let max_iter = 20_000;
    for _ in 0..max_iter {
        x[0] = s.x0;
        for j in 0..fine {
            x[j + 1] = x[j] + h * (s.a * x[j] + s.c * u[j]);
        }
        // Discrete adjoint with the pointwise KKT multiplier.
        let kkt = |mu: f64, j: usize, x: &[f64]| {
            let u_star = -s.c * mu / s.v;
            let hx = slope[j] * x[j];
            (u_star.min(hx), s.v * (u_star - hx).max(0.0))
        };
        mu[fine - 1] = s.ell * x[fine] + s.terminal_slope;
        eta[fine - 1] = kkt(mu[fine - 1], fine - 1, &x).1;
        for j in (0..fine - 1).rev() {
            mu[j] = mu[j + 1] * (1.0 + s.a * h) + h * (s.q * x[j + 1] - eta[j + 1] * slope[j + 1]);
            eta[j] = kkt(mu[j], j, &x).1;
        }
        let mut change = 0.0f64;
        let mut size = 0.0f64;
        for j in 0..fine {
            let target = kkt(mu[j], j, &x).0;
            change = change.max((target - u[j]).abs());
            u[j] += damping * (target - u[j]);
            size = size.max(u[j].abs());
        }
        if !change.is_finite() {
            return Err(Error::NonFinite { step: 0, particle: 0 });
        }
        if change <= 1e-12 * (1.0 + size) {
            let node = |k: usize| k * sub;
            let mut adjoint: Vec<f64> = (0..steps).map(|k| mu[node(k)]).collect();
            adjoint.push(s.ell * x[fine] + s.terminal_slope);
            return Ok(AdjointReference {
                times: (0..=steps).map(|k| s.horizon * k as f64 / steps as f64).collect(),
                state: (0..=steps).map(|k| x[node(k)]).collect(),
                adjoint,
                eta: (0..steps).map(|k| eta[node(k)]).collect(),
            });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: f64::NAN })
}

/// Rescaled discrete multipliers against the continuous reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierComparison {
    pub dt: f64,
    /// `1 / r0`, undoing the certificate normalization.
    pub scaling_factor: f64,
    /// Rescaled multiplier of dynamics row `k`, `k = 0..M-1`.
    pub discrete: Vec<f64>,
    /// Reference adjoint at `t_0..t_M`.
    pub adjoint: Vec<f64>,
    /// `max_k |mu_k - p(t_k)|` (left-node matching).
    pub sup_error: f64,
    /// `max_k |mu_k - p(t_{k+1})|` (right-node matching).
    pub sup_error_right: f64,
    /// `mu_{M-1}` against the continuous terminal gradient `ell x(T) + r`.
    pub terminal_multiplier: f64,
    pub terminal_gradient: f64,
    pub transversality_error: f64,
    /// Discrete inequality multipliers divided by `dt` (empty if unconstrained).
    pub eta_discrete: Vec<f64>,
    /// `max |eta_k - eta(t_k)|` over nodes where the reference constraint is active.
    pub eta_sup_error: Option<f64>,
    pub active_nodes: usize,
}

/// Rescales `cert` to `r0 = 1` and matches its dynamics multipliers with the
/// reference adjoint.
pub fn compare_multipliers(
    problem: &DiscreteControlProblem,
    cert: &FjCertificate,
    reference: &AdjointReference,
) -> Result<MultiplierComparison> {
    if !(cert.r0 > 1e-12) {
        return Err(Error::Abnormal);
    }
    let m = problem.steps;
    if cert.mus.len() != 2 || cert.mus[0].len() != m || reference.adjoint.len() != m + 1 {
        return Err(Error::DimensionMismatch {
            what: "certificate / reference layout",
            expected: m,
            found: cert.mus.first().map_or(0, |v| v.len()),
        });
    }
    let scale = 1.0 / cert.r0;
    let discrete: Vec<f64> = cert.mus[0].iter().map(|mu| mu * scale).collect();
    let sup = |shift: usize| {
        discrete
            .iter()
            .enumerate()
            .map(|(k, mu)| (mu - reference.adjoint[k + shift]).abs())
            .fold(0.0, f64::max)
    };
    let s = &problem.scenario;
    let terminal_gradient = s.ell * reference.state[m] + s.terminal_slope;
    let terminal_multiplier = discrete[m - 1];
    let transversality_error =
        (terminal_multiplier - terminal_gradient).abs() / terminal_gradient.abs().max(f64::MIN_POSITIVE);

    let eta_discrete: Vec<f64> = cert
        .lambdas
        .first()
        .map(|l| l.iter().map(|v| v * scale / problem.dt).collect())
        .unwrap_or_default();
    let (eta_sup_error, active_nodes) = if eta_discrete.is_empty() {
        (None, 0)
    } else {
        let peak = reference.eta.iter().fold(0.0f64, |a, b| a.max(*b));
        let band = 1e-6 * (1.0 + peak);
        let active: Vec<usize> = (0..m).filter(|&k| reference.eta[k] > band).collect();
        let err = active
            .iter()
            .map(|&k| (eta_discrete[k] - reference.eta[k]).abs())
            .fold(0.0, f64::max);
        ((!active.is_empty()).then_some(err), active.len())
    };

    let (sup_error, sup_error_right) = (sup(0), sup(1));
    Ok(MultiplierComparison {
        dt: problem.dt,
        scaling_factor: scale,
        discrete,
        adjoint: reference.adjoint.clone(),
        sup_error,
        sup_error_right,
        terminal_multiplier,
        terminal_gradient,
        transversality_error,
        eta_discrete,
        eta_sup_error,
        active_nodes,
    })
}

/// Discretize, solve, recover the certificate and compare, at one `dt`.
pub fn bridge_run(scenario: &DeterministicLq, dt: f64) -> Result<(MultiplierComparison, Recovery)> {
    let steps = steps_for(scenario.horizon, dt)?;
    let problem = discretize(scenario, steps)?;
    let solution = problem.solve()?;
    let recovery = problem.certificate(&solution)?;
    let reference = adjoint_reference(scenario, steps)?;
    let cmp = compare_multipliers(&problem, &recovery.certificate, &reference)?;
    Ok((cmp, recovery))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub sup_error: f64,
    /// Observed order against the previous row.
    pub order_estimate: Option<f64>,
    pub sup_error_right: f64,
    pub transversality_error: f64,
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log sup_error` against `log dt`.
    pub slope: Option<f64>,
}

/// Errors below this multiple of the adjoint size count as rounding.
const ROUNDING_FLOOR: f64 = 1e-11;

/// Runs the comparison for each `dt` (strictly decreasing) and fits the
/// observed order.
pub fn convergence_study(scenario: &DeterministicLq, dt_list: &[f64]) -> Result<ConvergenceTable> {
    if dt_list.is_empty() || dt_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidInput("dt list must be non-empty and strictly decreasing".into()));
    }
    let runs = par::map_range(dt_list.len(), |i| bridge_run(scenario, dt_list[i]));
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(runs.len());
    let mut floors = Vec::with_capacity(runs.len());
    for (i, run) in runs.into_iter().enumerate() {
        let (cmp, rec) = run?;
        let size = cmp.adjoint.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let resolved = cmp.sup_error > ROUNDING_FLOOR * (1.0 + size);
        let order_estimate = match rows.last() {
            Some(prev) if resolved && floors[i - 1] => {
                Some((prev.sup_error / cmp.sup_error).ln() / (prev.dt / cmp.dt).ln())
            }
            _ => None,
        };
        floors.push(resolved);
        rows.push(ConvergenceRow {
            dt: cmp.dt,
            sup_error: cmp.sup_error,
            order_estimate,
            sup_error_right: cmp.sup_error_right,
            transversality_error: cmp.transversality_error,
            stationarity_residual: rec.stationarity_residual,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .zip(&floors)
        .filter(|(_, ok)| **ok)
        .map(|(r, _)| (r.dt.ln(), r.sup_error.ln()))
        .collect();
    let slope = (pts.len() >= 2 && pts.len() == rows.len()).then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    });
    Ok(ConvergenceTable { rows, slope })
}

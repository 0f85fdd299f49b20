//! The scalar linear-quadratic mean-field example with the state-control
//! constraint `h(t) X_t - alpha_t >= 0`.
//!
//! Dynamics `dX = (b1 X + b2 E[X] + b3 alpha + b4 E[alpha]) dt
//! + (s1 X + s2 E[X] + s3 alpha + s4 E[alpha]) dW`, cost
//! `E[ int (q X^2 + v alpha^2)/2 dt + ell (X_T - E[X_T])^2 / 2 ]`.
//!
//! Provided here: the Riccati reference solution, an independent discrete
//! dynamic-programming oracle, the forward-backward particle solver for the
//! unconstrained and constrained problems, the pointwise KKT control and the
//! mean-field-game fixed point.

use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{bsde_residual, solve_backward, AdjointSolution, DriverSpec, RegressionBasis};
use crate::cones::BoxSet;
use crate::constraints::{ConstraintSpec, MultiplierSet};
use crate::error::{Error, Result};
use crate::linalg::pairwise_mean;
use crate::mvsde::{
    simulate_frozen, simulate_with_noise, BrownianNoise, ControlPolicy, CostEstimate, CostFunctional, InitialLaw,
    LinearMeanField, MeanFieldDynamics, ParticleEnsemble, QuadraticCost, SimulationSetup, TimeGrid,
};
use crate::smp::{normalize, smp_report, support_check, SmpReport};

/// Constraint slope `h(t)`: a constant or a piecewise-linear table of
/// `(t, h)` knots (held constant outside the knots).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Slope {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl Slope {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Slope::Constant(h) => *h,
            Slope::Table(knots) => {
                let (first, last) = (knots[0], knots[knots.len() - 1]);
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let j = knots.partition_point(|(s, _)| *s <= t);
                let ((t0, h0), (t1, h1)) = (knots[j - 1], knots[j]);
                h0 + (h1 - h0) * (t - t0) / (t1 - t0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Slope::Constant(h) if h.is_nan() => Err(Error::InvalidInput("constraint slope is NaN".into())),
            Slope::Constant(_) => Ok(()),
            Slope::Table(k) => {
                if k.is_empty() {
                    return Err(Error::InvalidInput("empty constraint slope table".into()));
                }
                if k.iter().any(|(t, h)| !t.is_finite() || h.is_nan()) || k.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::InvalidInput("slope table needs finite, strictly increasing times".into()));
                }
                Ok(())
            }
        }
    }
}

/// Coefficients, weights, initial law and constraint of the example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqModel {
    /// `b1..b4`.
    pub b: [f64; 4],
    /// `s1..s4`.
    pub s: [f64; 4],
    pub q: f64,
    pub v: f64,
    pub ell: f64,
    pub horizon: f64,
    pub m0: f64,
    pub v0: f64,
    pub h: Slope,
    pub constrained: bool,
}

impl LqModel {
    /// The reference parameter set used throughout the tests.
    pub fn benchmark() -> Self {
        Self {
            b: [-0.5, 0.2, 1.0, 0.0],
            s: [0.2, 0.0, 0.0, 0.0],
            q: 1.0,
            v: 1.0,
            ell: 1.0,
            horizon: 1.0,
            m0: 1.0,
            v0: 0.04,
            h: Slope::Constant(0.5),
            constrained: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [self.q, self.v, self.ell, self.horizon, self.m0, self.v0];
        if self.b.iter().chain(&self.s).chain(&scalars).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("model parameters must be finite".into()));
        }
        if !(self.v > 0.0) {
            return Err(Error::InvalidInput(format!("control weight v must be positive, got {}", self.v)));
        }
        if self.q < 0.0 || self.ell < 0.0 || self.v0 < 0.0 {
            return Err(Error::InvalidInput("q, ell and v0 must be nonnegative".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        self.h.validate()
    }

    pub fn dynamics(&self) -> LinearMeanField {
        LinearMeanField::lq(self.b, self.s)
    }

    pub fn cost(&self) -> QuadraticCost {
        QuadraticCost { q: self.q, v: self.v, ell: self.ell, centered: true }
    }

    pub fn initial_law(&self) -> InitialLaw {
        if self.v0 == 0.0 {
            InitialLaw::PointMass(vec![self.m0])
        } else {
            InitialLaw::Gaussian { mean: vec![self.m0], variance: vec![self.v0] }
        }
    }

    /// `h(t) x - u >= 0` when constrained, nothing otherwise.
    pub fn constraint_spec(&self) -> ConstraintSpec {
        if self.constrained {
            let h = self.h.clone();
            ConstraintSpec::upper_feedback_bound(Arc::new(move |t| h.at(t)))
        } else {
            ConstraintSpec::none()
        }
    }

    /// Whether any coefficient couples to the means.
    pub fn has_mean_coupling(&self) -> bool {
        self.b[1] != 0.0 || self.b[3] != 0.0 || self.s[1] != 0.0 || self.s[3] != 0.0
    }
}

/// Solution of the Riccati system on a grid.
///
/// `Y_t = beta_t X_t + zeta_t E[X_t]`; `gamma = beta + zeta` drives the mean.
/// The optimal control is `gain_fluctuation (X - E[X]) + gain_mean E[X]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gain_fluctuation: Vec<f64>,
    pub gain_mean: Vec<f64>,
    pub value: f64,
}

impl RiccatiSolution {
    pub fn control(&self, k: usize, x: f64, mean_x: f64) -> f64 {
        self.gain_fluctuation[k] * (x - mean_x) + self.gain_mean[k] * mean_x
    }
}

fn riccati_gains(m: &LqModel, beta: f64, gamma: f64) -> (f64, f64) {
    let [_, _, b3, b4] = m.b;
    let [s1, s2, s3, s4] = m.s;
    let (c, r, sm) = (b3 + b4, s3 + s4, s1 + s2);
    let k1 = -beta * (b3 + s3 * s1) / (m.v + s3 * s3 * beta);
    let k2 = -(c * gamma + r * sm * beta) / (m.v + r * r * beta);
    (k1, k2)
}

fn riccati_rhs(m: &LqModel, beta: f64, gamma: f64) -> (f64, f64) {
    let [b1, b2, b3, b4] = m.b;
    let [s1, s2, s3, s4] = m.s;
    let (k1, k2) = riccati_gains(m, beta, gamma);
    let db = -2.0 * b1 * beta - b3 * beta * k1 - s1 * beta * (s1 + s3 * k1) - m.q;
    let (a, c, sm, r) = (b1 + b2, b3 + b4, s1 + s2, s3 + s4);
    let dg = -2.0 * a * gamma - c * gamma * k2 - sm * beta * (sm + r * k2) - m.q;
    (db, dg)
}

const BLOWUP: f64 = 1e8;

/// Integrates `(beta, gamma)` backward from `(ell, 0)` with RK4 on the grid.
pub fn riccati_solve(model: &LqModel, steps: usize) -> Result<RiccatiSolution> {
    model.validate()?;
    let grid = TimeGrid::new(model.horizon, steps)?;
    let dt = grid.dt();
    let mut beta = vec![0.0; steps + 1];
    let mut gamma = vec![0.0; steps + 1];
    beta[steps] = model.ell;
    let bad = |b: f64, g: f64| {
        let denom = |s: f64| model.v + s * s * b;
        !b.is_finite() || !g.is_finite() || b.abs() > BLOWUP || g.abs() > BLOWUP
            || denom(model.s[2]) <= 0.0
            || denom(model.s[2] + model.s[3]) <= 0.0
    };
    for k in (0..steps).rev() {
        let (b, g) = (beta[k + 1], gamma[k + 1]);
        let f = |b: f64, g: f64| riccati_rhs(model, b, g);
        let h = -dt;
        let (k1b, k1g) = f(b, g);
        let (k2b, k2g) = f(b + 0.5 * h * k1b, g + 0.5 * h * k1g);
        let (k3b, k3g) = f(b + 0.5 * h * k2b, g + 0.5 * h * k2g);
        let (k4b, k4g) = f(b + h * k3b, g + h * k3g);
        beta[k] = b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        gamma[k] = g + h / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g);
        if bad(beta[k], gamma[k]) {
            return Err(Error::RiccatiBlowup { time: grid.t(k) });
        }
    }
    let (gain_fluctuation, gain_mean): (Vec<f64>, Vec<f64>) =
        beta.iter().zip(&gamma).map(|(b, g)| riccati_gains(model, *b, *g)).unzip();
    Ok(RiccatiSolution {
        times: (0..=steps).map(|k| grid.t(k)).collect(),
        zeta: gamma.iter().zip(&beta).map(|(g, b)| g - b).collect(),
        value: 0.5 * (beta[0] * model.v0 + gamma[0] * model.m0 * model.m0),
        beta,
        gamma,
        gain_fluctuation,
        gain_mean,
    })
}

/// Exact discrete-time dynamic programming on `(E[X], X - E[X])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSolution {
    pub value: f64,
    /// Optimal `alpha_k - E[alpha_k] = K_k (X_k - E[X_k])`.
    pub fluctuation_gains: Vec<f64>,
    /// Optimal `E[alpha_k] = L_k E[X_k]`.
    pub mean_gains: Vec<f64>,
    /// Value coefficients: `V_k = (B_k Var + C_k m^2) / 2`.
    pub fluctuation_value: Vec<f64>,
    pub mean_value: Vec<f64>,
}

/// Backward quadratic recursions of the Euler-discretized problem with
/// step `dt` (which must divide the horizon).
pub fn lq_oracle_discrete(model: &LqModel, dt: f64) -> Result<OracleSolution> {
    model.validate()?;
    let steps_f = model.horizon / dt;
    let steps = steps_f.round() as usize;
    if !(dt > 0.0) || steps == 0 || (steps_f - steps as f64).abs() > 1e-6 * steps_f.max(1.0) {
        return Err(Error::InvalidInput(format!("dt = {dt} does not divide the horizon {}", model.horizon)));
    }
    let dt = model.horizon / steps as f64;
    let [b1, b2, b3, b4] = model.b;
    let [s1, s2, s3, s4] = model.s;
    let (q, v) = (model.q, model.v);
    let (a, c, sm, r) = (1.0 + (b1 + b2) * dt, (b3 + b4) * dt, s1 + s2, s3 + s4);
    let mut big_b = vec![0.0; steps + 1];
    let mut big_c = vec![0.0; steps + 1];
    let mut kf = vec![0.0; steps];
    let mut lm = vec![0.0; steps];
    big_b[steps] = model.ell;
    for k in (0..steps).rev() {
        let (bb, cc) = (big_b[k + 1], big_c[k + 1]);
        let e = 1.0 + b1 * dt;
        let kk = -bb * (e * b3 * dt + dt * s1 * s3) / (v * dt + bb * (b3 * b3 * dt * dt + dt * s3 * s3));
        big_b[k] = (q + v * kk * kk) * dt + bb * ((e + b3 * dt * kk).powi(2) + dt * (s1 + s3 * kk).powi(2));
        let ll = -(bb * dt * sm * r + cc * a * c) / (v * dt + bb * dt * r * r + cc * c * c);
        big_c[k] = (q + v * ll * ll) * dt + bb * dt * (sm + r * ll).powi(2) + cc * (a + c * ll).powi(2);
        kf[k] = kk;
        lm[k] = ll;
    }
    Ok(OracleSolution {
        value: 0.5 * (big_b[0] * model.v0 + big_c[0] * model.m0 * model.m0),
        fluctuation_gains: kf,
        mean_gains: lm,
        fluctuation_value: big_b,
        mean_value: big_c,
    })
}

/// Scalar KKT system `v alpha - v u* + eta = 0`, `eta >= 0`,
/// `hx - alpha >= 0`, `eta (hx - alpha) = 0`.
pub fn pointwise_kkt_control(u_star: f64, hx: f64, v: f64) -> (f64, f64) {
    if u_star <= hx {
        (u_star, 0.0)
    } else {
        (hx, v * (u_star - hx))
    }
}

/// Particle, grid and iteration settings of the fixed-point solvers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSettings {
    pub steps: usize,
    pub particles: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub damping: f64,
    /// Stop when the RMS change of the control field falls below this.
    pub tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { steps: 100, particles: 50_000, seed: 42, max_iter: 100, damping: 0.5, tol: 1e-4 }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("need at least one time step".into()));
        }
        Ok(())
    }
}

/// Diagnostics of one solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqSolveReport {
    pub cost: CostEstimate,
    /// Maximum-principle checks on the normalized multiplier bundle.
    pub smp: SmpReport,
    pub iterations: usize,
    pub converged: bool,
    /// RMS change of the control field per iteration.
    pub residual_history: Vec<f64>,
    /// `(probability, quantile)` of `h X - alpha` over particle-steps (constrained only).
    pub feasibility_quantiles: Vec<(f64, f64)>,
    /// `E int |psi eta| dt` for the unnormalized `eta`.
    pub slackness_integral: f64,
    pub eta_norm: f64,
    /// Fraction of particle-steps with `eta > 0`.
    pub active_fraction: f64,
    pub bsde_residual: f64,
    pub min_r_squared: f64,
    /// Riccati value for reference (unconstrained mean-field control only).
    pub reference_value: Option<f64>,
}

/// A solve with its final ensemble, adjoint and multipliers.
#[derive(Debug, Clone)]
pub struct LqOutcome {
    pub report: LqSolveReport,
    pub ensemble: ParticleEnsemble,
    pub adjoint: AdjointSolution,
    /// `r0 = 1` and the `eta` field of the final forward pass.
    pub multipliers: MultiplierSet,
    /// Unclamped control field `u*` per particle-step (`k * N + i`).
    pub target: Vec<f64>,
}

/// Mean paths held fixed in the game formulation.
#[derive(Debug, Clone)]
struct Flow {
    mean_x: Vec<f64>,
    mean_a: Vec<f64>,
}

/// `u* = -(b3 Y + b4 E[Y] + s3 Z + s4 E[Z]) / v` per particle-step; in the
/// game formulation the mean terms are absent.
pub fn desired_control(model: &LqModel, game: bool, ens: &ParticleEnsemble, adj: &AdjointSolution) -> Vec<f64> {
    let (np, m) = (ens.particles, ens.grid.steps());
    let [_, _, b3, b4] = model.b;
    let [_, _, s3, s4] = model.s;
    let (b4, s4) = if game { (0.0, 0.0) } else { (b4, s4) };
    let mut out = vec![0.0; (m + 1) * np];
    for k in 0..=m {
        let ey = adj.mean_y(k)[0];
        let ez = if k < m { adj.mean_z(k)[0] } else { 0.0 };
        for i in 0..np {
            let z = if k < m { adj.z_at(k, i)[0] } else { 0.0 };
            out[k * np + i] = -(b3 * adj.y_at(k, i)[0] + b4 * ey + s3 * z + s4 * ez) / model.v;
        }
    }
    out
}

struct Engine<'a> {
    model: &'a LqModel,
    settings: &'a SolverSettings,
    setup: SimulationSetup,
    noise: BrownianNoise,
    dynamics: LinearMeanField,
    spec: ConstraintSpec,
    constrained: bool,
    flow: Option<Flow>,
}

struct FixedPoint {
    ens: ParticleEnsemble,
    adj: AdjointSolution,
    mult: MultiplierSet,
    target: Vec<f64>,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a LqModel, settings: &'a SolverSettings, constrained: bool) -> Result<Self> {
        model.validate()?;
        settings.validate()?;
        let setup = SimulationSetup {
            grid: TimeGrid::new(model.horizon, settings.steps)?,
            particles: settings.particles,
            seed: settings.seed,
            initial: model.initial_law(),
        };
        let dynamics = model.dynamics();
        let noise = BrownianNoise::generate(&setup, dynamics.dims())?;
        let mut m = model.clone();
        m.constrained = constrained;
        Ok(Self { model, settings, setup, noise, dynamics, spec: m.constraint_spec(), constrained, flow: None })
    }

    fn game(&self) -> bool {
        self.flow.is_some()
    }

    fn forward(&self, target: &Arc<Vec<f64>>) -> Result<(ParticleEnsemble, MultiplierSet)> {
        let np = self.setup.particles;
        let policy = {
            let target = Arc::clone(target);
            let h = self.model.h.clone();
            let constrained = self.constrained;
            ControlPolicy::indexed(move |k, i, t, x, _mx, out| {
                let u = target[k * np + i];
                out[0] = if constrained { pointwise_kkt_control(u, h.at(t) * x[0], 1.0).0 } else { u };
            })
        };
        let ens = match &self.flow {
            Some(f) => simulate_frozen(&self.dynamics, &policy, &self.setup, &self.noise, &f.mean_x, &f.mean_a)?,
            None => simulate_with_noise(&self.dynamics, &policy, &self.setup, &self.noise)?,
        };
        let m = self.setup.grid.steps();
        let mut mult = MultiplierSet::classical(&self.spec, m, np, self.setup.grid.dt());
        if self.constrained {
            for k in 0..=m {
                let hk = self.model.h.at(self.setup.grid.t(k));
                for i in 0..np {
                    let (_, eta) = pointwise_kkt_control(target[k * np + i], hk * ens.state(k, i)[0], self.model.v);
                    mult.eta[0][k * np + i] = eta;
                }
            }
        }
        Ok((ens, mult))
    }

    fn driver(&self) -> DriverSpec {
        let [b1, b2, _, _] = self.model.b;
        let [s1, s2, _, _] = self.model.s;
        let (q, ell) = (self.model.q, self.model.ell);
        match &self.flow {
            None => DriverSpec::new(
                move |a, out| out[0] = b1 * a.y[0] + b2 * a.mean_y[0] + s1 * a.z[0] + s2 * a.mean_z[0] + q * a.x[0],
                move |x, mx, out| out[0] = ell * (x[0] - mx[0]),
                true,
            ),
            Some(f) => {
                let m_t = *f.mean_x.last().expect("flow has a terminal node");
                DriverSpec::new(
                    move |a, out| out[0] = b1 * a.y[0] + s1 * a.z[0] + q * a.x[0],
                    move |x, _mx, out| out[0] = ell * (x[0] - m_t),
                    true,
                )
            }
        }
    }

    /// Dynamics seen by the maximum-principle check (mean coefficients
    /// dropped in the game formulation, where the flow is exogenous).
    fn check_dynamics(&self) -> LinearMeanField {
        let mut d = self.dynamics;
        if self.game() {
            d.b[2] = 0.0;
            d.b[4] = 0.0;
            d.s[2] = 0.0;
            d.s[4] = 0.0;
        }
        d
    }

    fn backward(&self, ens: &ParticleEnsemble, mult: &MultiplierSet) -> Result<AdjointSolution> {
        solve_backward(ens, &self.dynamics, &self.driver(), mult, &self.spec, RegressionBasis::default())
    }

    fn run(&self, initial: Vec<f64>) -> Result<FixedPoint> {
        let mut target = initial;
        let mut history = Vec::new();
        let (np, m) = (self.setup.particles, self.setup.grid.steps());
        for it in 1..=self.settings.max_iter {
            let shared = Arc::new(target);
            let (ens, mult) = self.forward(&shared)?;
            target = Arc::try_unwrap(shared).unwrap_or_else(|a| (*a).clone());
            let adj = self.backward(&ens, &mult)?;
            let new = desired_control(self.model, self.game(), &ens, &adj);
            let sq: Vec<f64> = new[..m * np].iter().zip(&target).map(|(a, b)| (a - b).powi(2)).collect();
            let dist = pairwise_mean(&sq).sqrt();
            history.push(dist);
            let converged = dist < self.settings.tol;
            if converged || it == self.settings.max_iter {
                return Ok(FixedPoint { ens, adj, mult, target, iterations: it, converged, history });
            }
            let d = self.settings.damping;
            for (t, n) in target.iter_mut().zip(&new) {
                *t += d * (n - *t);
            }
        }
        unreachable!("max_iter is positive")
    }

    fn report(&self, fp: FixedPoint, reference_value: Option<f64>) -> Result<LqOutcome> {
        let cost_fn = self.model.cost();
        let cost = cost_fn.evaluate(&fp.ens);
        let (np, m) = (self.setup.particles, self.setup.grid.steps());
        let eta_norm = if self.constrained { fp.mult.eta_norm(0) } else { 0.0 };

        // Maximum-principle report on the normalized bundle; (Y, Z) scale with it.
        let normalized = normalize(&fp.mult)?;
        let scale = normalized.r0 / fp.mult.r0;
        let mut scaled = fp.adj.clone();
        scaled.y.iter_mut().chain(scaled.z.iter_mut()).for_each(|v| *v *= scale);
        let smp = smp_report(
            &fp.ens,
            &scaled,
            &normalized,
            &self.spec,
            &self.check_dynamics(),
            &cost_fn,
            &BoxSet::unbounded(1),
            1e-6,
        )?;
        let (_, slack) = support_check(&fp.mult, &fp.ens, &self.spec, 1e-6)?;

        let mut feasibility_quantiles = Vec::new();
        let mut active_fraction = 0.0;
        if self.constrained {
            let mut gaps: Vec<f64> = (0..m)
                .flat_map(|k| {
                    let hk = self.model.h.at(self.setup.grid.t(k));
                    let ens = &fp.ens;
                    (0..np).map(move |i| hk * ens.state(k, i)[0] - ens.control(k, i)[0])
                })
                .collect();
            gaps.sort_by(f64::total_cmp);
            for p in [0.0, 0.01, 0.5, 0.99, 1.0] {
                let idx = ((gaps.len() - 1) as f64 * p).round() as usize;
                feasibility_quantiles.push((p, gaps[idx]));
            }
            let active = fp.mult.eta[0][..m * np].iter().filter(|e| **e > 0.0).count();
            active_fraction = active as f64 / (m * np) as f64;
        }
        let bsde_residual = bsde_residual(&fp.ens, &self.dynamics, &self.driver(), &fp.mult, &self.spec, &fp.adj)?;
        let min_r_squared = fp.adj.r_squared.iter().copied().fold(1.0, f64::min);
        Ok(LqOutcome {
            report: LqSolveReport {
                cost,
                smp,
                iterations: fp.iterations,
                converged: fp.converged,
                residual_history: fp.history,
                feasibility_quantiles,
                slackness_integral: slack.first().copied().unwrap_or(0.0),
                eta_norm,
                active_fraction,
                bsde_residual,
                min_r_squared,
                reference_value,
            },
            ensemble: fp.ens,
            adjoint: fp.adj,
            multipliers: fp.mult,
            target: fp.target,
        })
    }
}

fn zero_field(settings: &SolverSettings) -> Vec<f64> {
    vec![0.0; (settings.steps + 1) * settings.particles]
}

/// Forward-backward fixed point for the unconstrained problem, started from
/// the zero control. The constraint flag of `model` is ignored.
pub fn solve_unconstrained(model: &LqModel, settings: &SolverSettings) -> Result<LqOutcome> {
    let engine = Engine::new(model, settings, false)?;
    let fp = engine.run(zero_field(settings))?;
    let reference = riccati_solve(model, settings.steps)?.value;
    engine.report(fp, Some(reference))
}

/// Constrained fixed point with the pointwise KKT control, warm-started from
/// the unconstrained solution.
pub fn solve_constrained(model: &LqModel, settings: &SolverSettings) -> Result<LqOutcome> {
    let warm = Engine::new(model, settings, false)?.run(zero_field(settings))?;
    let engine = Engine::new(model, settings, true)?;
    let fp = engine.run(warm.target)?;
    engine.report(fp, None)
}

/// Outer consistency loop of the game formulation.
#[derive(Debug, Clone)]
pub struct MfgOutcome {
    pub inner: LqOutcome,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Sup-node distance between the frozen flow and the flow it generates.
    pub consistency_history: Vec<f64>,
}

/// Freezes the mean flow, solves the resulting control problem (with or
/// without the constraint, per `model.constrained`), recomputes the flow and
/// repeats until the sup-node change is below `tol`. Warm-started from the
/// mean-field control solution; the flow update uses `settings.damping`.
pub fn mfg_solve(model: &LqModel, settings: &SolverSettings, outer_iter: usize, tol: f64) -> Result<MfgOutcome> {
    if outer_iter == 0 {
        return Err(Error::InvalidInput("outer_iter must be positive".into()));
    }
    let start = if model.constrained { solve_constrained(model, settings)? } else { solve_unconstrained(model, settings)? };
    let mut flow = Flow { mean_x: start.ensemble.mean_x.clone(), mean_a: start.ensemble.mean_a.clone() };
    let mut target = start.target;
    let mut history = Vec::new();
    for o in 1..=outer_iter {
        let mut engine = Engine::new(model, settings, model.constrained)?;
        engine.flow = Some(flow.clone());
        let fp = engine.run(target)?;
        let ens = &fp.ens;
        let dist = ens
            .mean_x
            .iter()
            .zip(&flow.mean_x)
            .chain(ens.mean_a.iter().zip(&flow.mean_a))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        history.push(dist);
        let converged = dist < tol;
        if converged || o == outer_iter {
            let inner = engine.report(fp, None)?;
            return Ok(MfgOutcome { inner, outer_iterations: o, converged, consistency_history: history });
        }
        let d = settings.damping;
        for (f, n) in flow.mean_x.iter_mut().zip(&ens.mean_x) {
            *f += d * (n - *f);
        }
        for (f, n) in flow.mean_a.iter_mut().zip(&ens.mean_a) {
            *f += d * (n - *f);
        }
        target = fp.target;
    }
    unreachable!("outer_iter is positive")
}

#[cfg(test)]
mod tests;

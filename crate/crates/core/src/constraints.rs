//! Dynamic constraints and their multipliers on a particle grid.
//!
//! Expectation constraints `E[phi(t, X_t, alpha~^t)] >= 0` are restricted to
//! the separable family `phi = phi_x(t, x) + Phi(int_0^t k(s) . alpha_s ds)`
//! so the control-path derivative is `k(t) Phi'(.)`. Pathwise constraints are
//! `psi(t, X_t, alpha_t) >= 0`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::pairwise_mean;
use crate::mvsde::ParticleEnsemble;

pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type StateControlFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type StateControlGrad = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// `Phi(int_0^t k(s) . alpha_s ds)` part of an expectation constraint.
#[derive(Clone)]
pub struct PathKernel {
    /// `k(s)` in `R^l`.
    pub kernel: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
    pub outer: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub outer_derivative: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

#[derive(Clone)]
pub struct ExpectationConstraint {
    pub state_part: ScalarFn,
    pub state_gradient: VectorFn,
    pub path: Option<PathKernel>,
}

#[derive(Clone)]
pub struct PathwiseConstraint {
    pub value: StateControlFn,
    pub grad_x: StateControlGrad,
    pub grad_u: StateControlGrad,
}

/// All constraints of a problem.
#[derive(Clone, Default)]
pub struct ConstraintSpec {
    pub expectation: Vec<ExpectationConstraint>,
    pub pathwise: Vec<PathwiseConstraint>,
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("expectation", &self.expectation.len())
            .field("pathwise", &self.pathwise.len())
            .finish()
    }
}

impl ConstraintSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// `h(t) x - u >= 0` for scalar state and control.
    pub fn upper_feedback_bound(h: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        let hv = Arc::clone(&h);
        let hg = Arc::clone(&h);
        Self {
            expectation: Vec::new(),
            pathwise: vec![PathwiseConstraint {
                value: Arc::new(move |t, x, u| hv(t) * x[0] - u[0]),
                grad_x: Arc::new(move |t, _x, _u| vec![hg(t)]),
                grad_u: Arc::new(|_t, _x, _u| vec![-1.0]),
            }],
        }
    }

    /// Running path functional `int_0^{t_k} k(s) . alpha_s ds` (left endpoint)
    /// for every particle and step of constraint `i`; layout `k * N + particle`.
    pub fn path_functional(&self, i: usize, ens: &ParticleEnsemble) -> Vec<f64> {
        let (np, m) = (ens.particles, ens.grid.steps());
        let mut out = vec![0.0; (m + 1) * np];
        let Some(path) = &self.expectation[i].path else {
            return out;
        };
        let dt = ens.grid.dt();
        for k in 0..m {
            let kern = (path.kernel)(ens.grid.t(k));
            for p in 0..np {
                let inc: f64 = kern.iter().zip(ens.control(k, p)).map(|(a, b)| a * b).sum::<f64>() * dt;
                out[(k + 1) * np + p] = out[k * np + p] + inc;
            }
        }
        out
    }

    /// `phi^i(t_k, X_k, alpha~^{t_k})` for every particle-step (`k * N + particle`).
    pub fn expectation_values(&self, i: usize, ens: &ParticleEnsemble) -> Vec<f64> {
        let c = &self.expectation[i];
        let gamma = self.path_functional(i, ens);
        let np = ens.particles;
        (0..=ens.grid.steps())
            .flat_map(|k| {
                let gamma = &gamma;
                (0..np).map(move |p| {
                    let t = ens.grid.t(k);
                    let outer = c.path.as_ref().map_or(0.0, |pk| (pk.outer)(gamma[k * np + p]));
                    (c.state_part)(t, ens.state(k, p)) + outer
                })
            })
            .collect()
    }

    /// `E_N[phi^i(t_k)]` per step.
    pub fn expectation_means(&self, i: usize, ens: &ParticleEnsemble) -> Vec<f64> {
        let vals = self.expectation_values(i, ens);
        vals.chunks(ens.particles).map(pairwise_mean).collect()
    }

    /// `psi^j(t_k, X_k, alpha_k)` per particle-step.
    pub fn pathwise_values(&self, j: usize, ens: &ParticleEnsemble) -> Vec<f64> {
        let c = &self.pathwise[j];
        let np = ens.particles;
        (0..=ens.grid.steps())
            .flat_map(|k| (0..np).map(move |p| (c.value)(ens.grid.t(k), ens.state(k, p), ens.control(k, p))))
            .collect()
    }
}

/// `r0`, atom weights of the expectation-constraint measures and densities
/// `eta` of the pathwise-constraint processes `A = int eta dt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiplierSet {
    pub r0: f64,
    /// One weight per grid node (`M + 1`) per expectation constraint.
    pub atoms: Vec<Vec<f64>>,
    /// One `(M + 1) x N` array (layout `k * N + particle`) per pathwise constraint.
    pub eta: Vec<Vec<f64>>,
    pub steps: usize,
    pub particles: usize,
    pub dt: f64,
}

impl MultiplierSet {
    /// `r0 = 1` and all constraint multipliers zero.
    pub fn classical(spec: &ConstraintSpec, steps: usize, particles: usize, dt: f64) -> Self {
        Self {
            r0: 1.0,
            atoms: vec![vec![0.0; steps + 1]; spec.expectation.len()],
            eta: vec![vec![0.0; (steps + 1) * particles]; spec.pathwise.len()],
            steps,
            particles,
            dt,
        }
    }

    pub fn check_shape(&self, spec: &ConstraintSpec, ens: &ParticleEnsemble) -> Result<()> {
        check_dim("atom measures", spec.expectation.len(), self.atoms.len())?;
        check_dim("eta processes", spec.pathwise.len(), self.eta.len())?;
        check_dim("multiplier steps", ens.grid.steps(), self.steps)?;
        check_dim("multiplier particles", ens.particles, self.particles)?;
        for a in &self.atoms {
            check_dim("atom weights", self.steps + 1, a.len())?;
        }
        for e in &self.eta {
            check_dim("eta entries", (self.steps + 1) * self.particles, e.len())?;
        }
        if !(self.r0 >= 0.0) {
            return Err(Error::InvalidInput(format!("r0 must be nonnegative, got {}", self.r0)));
        }
        Ok(())
    }

    /// `||eta||_{L^2(dt x dP)}` with left-endpoint quadrature over steps `0..M`.
    pub fn eta_norm(&self, j: usize) -> f64 {
        let np = self.particles;
        let sq: Vec<f64> = self.eta[j][..self.steps * np].iter().map(|e| e * e).collect();
        (pairwise_mean(&sq) * self.steps as f64 * self.dt).sqrt()
    }

    /// `r0 + sum_i mu^i([0, T]) + sum_j ||eta^j||`.
    pub fn total_mass(&self) -> f64 {
        self.r0
            + self.atoms.iter().map(|a| a.iter().sum::<f64>()).sum::<f64>()
            + (0..self.eta.len()).map(|j| self.eta_norm(j)).sum::<f64>()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.r0 >= 0.0
            && self.atoms.iter().flatten().all(|w| *w >= 0.0)
            && self.eta.iter().flatten().all(|e| *e >= 0.0)
    }
}

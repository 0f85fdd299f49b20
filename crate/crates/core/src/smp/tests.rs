use std::sync::Arc;

use approx::assert_abs_diff_eq;

use super::*;
use crate::bsde::{solve_backward, DriverSpec, RegressionBasis};
use crate::constraints::{ExpectationConstraint, PathKernel};
use crate::mvsde::{
    simulate_forward, CoefficientJacobians, ControlPolicy, Dims, InitialLaw, LinearMeanField, Partials,
    QuadraticCost, RunningGradient, SimulationSetup, TimeGrid,
};

struct UnitCost;

impl CostFunctional for UnitCost {
    fn running(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64]) -> f64 {
        1.0
    }
    fn terminal(&self, _x: &[f64], _mx: &[f64]) -> f64 {
        0.0
    }
    fn running_gradient(&self, _t: f64, x: &[f64], _mx: &[f64], _ma: &[f64], u: &[f64]) -> RunningGradient {
        RunningGradient {
            x: vec![0.0; x.len()],
            mean_x: vec![0.0; x.len()],
            u: vec![0.0; u.len()],
            mean_a: vec![0.0; u.len()],
        }
    }
    fn terminal_gradient(&self, x: &[f64], _mx: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; x.len()], vec![0.0; x.len()])
    }
}

/// Constant drift `(1, 0)`, no noise.
struct Shift;

impl MeanFieldDynamics for Shift {
    fn dims(&self) -> Dims {
        Dims { state: 2, control: 1, noise: 1 }
    }
    fn drift(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0]);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jacobians(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64]) -> CoefficientJacobians {
        CoefficientJacobians { drift: Partials::zeros(2, 1), diffusion: vec![Partials::zeros(2, 1)] }
    }
}

#[test]
fn hamiltonian_hand_values() {
    let zero = LinearMeanField::default();
    assert_eq!(hamiltonian(0.0, &[0.3], &[0.0], &[0.0], &[0.2], &[5.0], &[7.0], 1.0, &zero, &UnitCost), 1.0);
    let h = hamiltonian(0.0, &[0.0, 0.0], &[0.0, 0.0], &[0.0], &[0.0], &[2.0, 3.0], &[0.0, 0.0], 0.0, &Shift, &UnitCost);
    assert_eq!(h, 2.0);
    let lq = LinearMeanField::lq([1.0, 1.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
    let cost = QuadraticCost { q: 1.0, v: 1.0, ell: 0.0, centered: true };
    assert_eq!(hamiltonian(0.0, &[1.0], &[1.0], &[1.0], &[1.0], &[1.0], &[1.0], 1.0, &lq, &cost), 5.0);
}

fn still_ensemble(steps: usize, particles: usize, u: f64) -> ParticleEnsemble {
    let setup = SimulationSetup {
        grid: TimeGrid::new(1.0, steps).unwrap(),
        particles,
        seed: 3,
        initial: InitialLaw::Gaussian { mean: vec![0.0], variance: vec![1.0] },
    };
    simulate_forward(&LinearMeanField::default(), &ControlPolicy::constant(vec![u]), &setup).unwrap()
}

fn zero_adjoint(ens: &ParticleEnsemble, spec: &ConstraintSpec, mult: &MultiplierSet) -> AdjointSolution {
    let d = DriverSpec::martingale(|_, _, out| out.fill(0.0));
    solve_backward(ens, &LinearMeanField::default(), &d, mult, spec, RegressionBasis::default()).unwrap()
}

#[test]
fn min_condition_vanishes_at_box_minimizer() {
    // f = u^2 on U = [-1, 1], alpha = 0.
    let ens = still_ensemble(10, 30, 0.0);
    let spec = ConstraintSpec::none();
    let mult = MultiplierSet::classical(&spec, 10, 30, ens.grid.dt());
    let adj = zero_adjoint(&ens, &spec, &mult);
    let cost = QuadraticCost { q: 0.0, v: 2.0, ell: 0.0, centered: false };
    let u = BoxSet::cube(1, -1.0, 1.0).unwrap();
    let dynamics = LinearMeanField::default();
    let r = min_condition_residual(&ens, &adj, &mult, &spec, &dynamics, &cost, &u).unwrap();
    assert_eq!(r, 0.0);

    // At alpha = 0.5, G = 1 and the residual is |0.5 - Proj(0.5 - 1)| = 1.
    let ens = still_ensemble(10, 30, 0.5);
    let r = min_condition_residual(&ens, &adj, &mult, &spec, &dynamics, &cost, &u).unwrap();
    assert_abs_diff_eq!(r, 1.0, epsilon = 1e-14);
}

fn level_constraint(level: f64) -> ConstraintSpec {
    ConstraintSpec {
        expectation: vec![ExpectationConstraint {
            state_part: Arc::new(move |_, _| level),
            state_gradient: Arc::new(|_, _| vec![0.0]),
            path: None,
        }],
        pathwise: Vec::new(),
    }
}

#[test]
fn support_check_examples() {
    let ens = still_ensemble(10, 20, 0.0);
    let spec = level_constraint(0.5);
    let mut mult = MultiplierSet::classical(&spec, 10, 20, ens.grid.dt());
    let (s, p) = support_check(&mult, &ens, &spec, 1e-3).unwrap();
    assert_eq!((s, p), (vec![0.0], vec![]));
    mult.atoms[0][4] = 1.0;
    let (s, _) = support_check(&mult, &ens, &spec, 1e-3).unwrap();
    assert_abs_diff_eq!(s[0], 0.499, epsilon = 1e-12);

    let bound = ConstraintSpec::upper_feedback_bound(Arc::new(|_| 0.0));
    let mult = MultiplierSet::classical(&bound, 10, 20, ens.grid.dt());
    let (s, p) = support_check(&mult, &ens, &bound, 1e-3).unwrap();
    assert_eq!((s, p), (vec![], vec![0.0]));
}

#[test]
fn normalize_examples() {
    let spec = level_constraint(0.0);
    let mut m = MultiplierSet::classical(&spec, 4, 2, 0.25);
    m.r0 = 2.0;
    assert_eq!(normalize(&m).unwrap().r0, 1.0);

    m.r0 = 1.0;
    m.atoms[0][2] = 1.0;
    let n = normalize(&m).unwrap();
    assert_eq!((n.r0, n.atoms[0][2]), (0.5, 0.5));
    assert!(n.atoms[0].iter().enumerate().all(|(k, w)| (k == 2) == (*w != 0.0)));

    let bound = ConstraintSpec::upper_feedback_bound(Arc::new(|_| 1.0));
    let mut m = MultiplierSet::classical(&bound, 4, 2, 0.25);
    m.r0 = 0.0;
    m.eta[0].iter_mut().for_each(|e| *e = 4.0);
    assert_abs_diff_eq!(m.eta_norm(0), 4.0, epsilon = 1e-14);
    let n = normalize(&m).unwrap();
    assert_eq!(n.r0, 0.0);
    assert_abs_diff_eq!(n.eta_norm(0), 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(n.total_mass(), 1.0, epsilon = 1e-14);

    m.eta[0].iter_mut().for_each(|e| *e = 0.0);
    assert!(normalize(&m).is_err());
}

#[test]
fn dual_ascent_examples() {
    let bound = ConstraintSpec::upper_feedback_bound(Arc::new(|_| 1.0));
    let m = MultiplierSet::classical(&bound, 2, 2, 0.5);
    let feasible = vec![vec![0.3; 6]];
    assert_eq!(dual_ascent_update(&m, &[], &feasible, 0.1).unwrap(), m);
    let mut psi = vec![vec![0.3; 6]];
    psi[0][3] = -1.0;
    let up = dual_ascent_update(&m, &[], &psi, 0.5).unwrap();
    assert_eq!(up.eta[0][3], 0.5);
    assert!(up.is_nonnegative());
    assert!(dual_ascent_update(&m, &[], &psi, 0.0).is_err());

    let spec = level_constraint(0.0);
    let m = MultiplierSet::classical(&spec, 2, 2, 0.5);
    let up = dual_ascent_update(&m, &[vec![-2.0, 1.0, 0.0]], &[], 0.25).unwrap();
    assert_eq!(up.atoms[0], vec![0.5, 0.0, 0.0]);
}

#[test]
fn path_kernel_and_eta_terms_enter_the_control_gradient() {
    let ens = still_ensemble(10, 5, 1.0);
    let dt = ens.grid.dt();
    let spec = ConstraintSpec {
        expectation: vec![ExpectationConstraint {
            state_part: Arc::new(|_, _| 0.0),
            state_gradient: Arc::new(|_, _| vec![0.0]),
            path: Some(PathKernel {
                kernel: Arc::new(|_| vec![1.0]),
                outer: Arc::new(|g| 0.5 * g * g),
                outer_derivative: Arc::new(|g| g),
            }),
        }],
        pathwise: ConstraintSpec::upper_feedback_bound(Arc::new(|_| 0.0)).pathwise,
    };
    let mut mult = MultiplierSet::classical(&spec, 10, 5, dt);
    mult.atoms[0][3] = 2.0;
    mult.eta[0][7 * 5 + 2] = 1.5;
    let adj = zero_adjoint(&ens, &spec, &mult);
    let cost = QuadraticCost { q: 0.0, v: 0.0, ell: 0.0, centered: false };
    let g = control_gradient(&ens, &adj, &mult, &spec, &LinearMeanField::default(), &cost).unwrap();
    for k in 0..10 {
        for i in 0..5 {
            let mut want = if k <= 3 { -2.0 * 3.0 * dt } else { 0.0 };
            if (k, i) == (7, 2) {
                want += 1.5;
            }
            assert_abs_diff_eq!(g[k * 5 + i], want, epsilon = 1e-14);
        }
    }
    // gamma grows by dt per step under a unit control.
    let gamma = spec.path_functional(0, &ens);
    assert_abs_diff_eq!(gamma[10 * 5], 1.0, epsilon = 1e-12);
}

#[test]
fn report_keys_and_zero_constraint_reduction() {
    let ens = still_ensemble(4, 6, 0.0);
    let spec = ConstraintSpec::none();
    let m = MultiplierSet::classical(&spec, 4, 6, ens.grid.dt());
    assert_eq!(normalize(&m).unwrap().r0, 1.0);
    let adj = zero_adjoint(&ens, &spec, &m);
    let cost = QuadraticCost { q: 1.0, v: 1.0, ell: 0.0, centered: false };
    let rep = smp_report(&ens, &adj, &m, &spec, &LinearMeanField::default(), &cost, &BoxSet::unbounded(1), 1e-6)
        .unwrap();
    let json = serde_json::to_value(&rep).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "min_condition_residual",
            "normalization_error",
            "primal_feasibility",
            "r0",
            "slackness_integral",
            "support_violation"
        ]
    );
    assert_eq!(rep.normalization_error, 0.0);
}

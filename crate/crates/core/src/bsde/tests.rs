use std::sync::Arc;

use approx::assert_abs_diff_eq;

use super::*;
use crate::constraints::{ConstraintSpec, ExpectationConstraint, MultiplierSet};
use crate::mvsde::{
    simulate_forward, CoefficientJacobians, ControlPolicy, Dims, InitialLaw, LinearMeanField, Partials,
    SimulationSetup, TimeGrid,
};

fn setup(steps: usize, particles: usize, initial: InitialLaw) -> SimulationSetup {
    SimulationSetup { grid: TimeGrid::new(1.0, steps).unwrap(), particles, seed: 11, initial }
}

fn brownian() -> LinearMeanField {
    LinearMeanField { b: [0.0; 5], s: [1.0, 0.0, 0.0, 0.0, 0.0] }
}

fn brownian_ensemble(steps: usize, particles: usize) -> ParticleEnsemble {
    simulate_forward(&brownian(), &ControlPolicy::constant(vec![0.0]), &setup(steps, particles, InitialLaw::PointMass(vec![0.0])))
        .unwrap()
}

fn none(ens: &ParticleEnsemble) -> (ConstraintSpec, MultiplierSet) {
    let spec = ConstraintSpec::none();
    let mult = MultiplierSet::classical(&spec, ens.grid.steps(), ens.particles, ens.grid.dt());
    (spec, mult)
}

fn lq_dynamics() -> LinearMeanField {
    LinearMeanField::lq([0.5, 0.2, 1.0, 0.1], [0.2, 0.1, 0.1, 0.05])
}

fn lq_driver(centered: bool) -> DriverSpec {
    let (b, s) = ([0.5, 0.2], [0.2, 0.1]);
    DriverSpec::new(
        move |a, out| out[0] = b[0] * a.y[0] + b[1] * a.mean_y[0] + s[0] * a.z[0] + s[1] * a.mean_z[0] + a.x[0],
        move |x, mx, out| out[0] = x[0] - if centered { mx[0] } else { 0.0 },
        true,
    )
}

fn lq_ensemble(steps: usize, particles: usize) -> ParticleEnsemble {
    let policy = ControlPolicy::feedback(|_, _, x, _, out| out[0] = -0.5 * x[0]);
    let init = InitialLaw::Gaussian { mean: vec![1.0], variance: vec![0.25] };
    simulate_forward(&lq_dynamics(), &policy, &setup(steps, particles, init)).unwrap()
}

#[test]
fn constant_terminal_gives_constant_solution() {
    let ens = brownian_ensemble(20, 200);
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|_, _, out| out[0] = 2.5);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap();
    assert!(sol.y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    assert!(sol.z.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn martingale_representation_is_exact_with_linear_basis() {
    let ens = brownian_ensemble(25, 500);
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|x, _, out| out[0] = x[0]);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap();
    for k in 0..=25 {
        for i in 0..500 {
            assert_abs_diff_eq!(sol.y_at(k, i)[0], ens.state(k, i)[0], epsilon = 1e-8);
            if k < 25 {
                assert_abs_diff_eq!(sol.z_at(k, i)[0], 1.0, epsilon = 1e-8);
            }
        }
    }
    let res = bsde_residual(&ens, &brownian(), &spec, &m, &c, &sol).unwrap();
    assert!(res < 1e-12, "residual {res}");
}

#[test]
fn quadratic_terminal_is_exact_with_quadratic_basis() {
    let ens = brownian_ensemble(10, 400);
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|x, _, out| out[0] = x[0] * x[0]);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis { degree: 2 }).unwrap();
    for k in 1..10 {
        for i in 0..400 {
            let x = ens.state(k, i)[0];
            assert_abs_diff_eq!(sol.y_at(k, i)[0], x * x + 1.0 - ens.grid.t(k), epsilon = 1e-8);
            assert_abs_diff_eq!(sol.z_at(k, i)[0], 2.0 * x, epsilon = 1e-8);
        }
    }
    assert_abs_diff_eq!(sol.y_at(0, 0)[0], 1.0, epsilon = 1e-8);
    assert!(sol.degree_used[1..].iter().all(|d| *d == 2));
}

#[test]
fn linear_driver_matches_exponential_growth() {
    // sigma = 0 and a point mass: every design is degenerate, so the basis
    // drops to the constant.
    let dynamics = LinearMeanField::default();
    let s = setup(200, 10, InitialLaw::PointMass(vec![0.0]));
    let ens = simulate_forward(&dynamics, &ControlPolicy::constant(vec![0.0]), &s).unwrap();
    let (c, m) = none(&ens);
    let spec = DriverSpec::new(|a, out| out[0] = 0.5 * a.y[0], |_, _, out| out[0] = 3.0, true);
    let sol = solve_backward(&ens, &dynamics, &spec, &m, &c, RegressionBasis::default()).unwrap();
    let exact = 3.0 * 0.5f64.exp();
    assert!((sol.y_at(0, 0)[0] - exact).abs() < 3.0 * ens.grid.dt() * exact);
    assert!(sol.degree_used.iter().all(|d| *d == 0));
}

fn atom_constraint() -> ConstraintSpec {
    ConstraintSpec {
        expectation: vec![ExpectationConstraint {
            state_part: Arc::new(|_, x| x[0]),
            state_gradient: Arc::new(|_, _| vec![-1.0]),
            path: None,
        }],
        pathwise: Vec::new(),
    }
}

#[test]
fn atom_jump_is_inclusive_at_its_node() {
    let ens = brownian_ensemble(10, 50);
    let c = atom_constraint();
    let mut m = MultiplierSet::classical(&c, 10, 50, ens.grid.dt());
    m.atoms[0][6] = 0.7;
    let spec = DriverSpec::martingale(|_, _, out| out[0] = 0.0);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap();
    for k in 0..=10 {
        let want = if k <= 6 { 0.7 } else { 0.0 };
        assert!(sol.y_step(k).iter().all(|v| (v - want).abs() < 1e-12), "step {k}");
    }

    // Same result through post-hoc atom application.
    let zero = {
        let z = MultiplierSet::classical(&c, 10, 50, ens.grid.dt());
        solve_backward(&ens, &brownian(), &spec, &z, &c, RegressionBasis::default()).unwrap()
    };
    let applied = apply_measure_atoms(&zero, &[(6, vec![0.7])]).unwrap();
    for (a, b) in applied.y.iter().zip(&sol.y) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
    assert_eq!(applied.applied_atoms.get(&6), Some(&vec![0.7]));
}

#[test]
fn two_atoms_accumulate_and_zero_atoms_are_identity() {
    let ens = brownian_ensemble(10, 20);
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|_, _, out| out[0] = 0.0);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap();
    let same = apply_measure_atoms(&sol, &[(3, vec![0.0])]).unwrap();
    assert_eq!(same.y, sol.y);
    let two = apply_measure_atoms(&sol, &[(3, vec![0.25]), (8, vec![0.5])]).unwrap();
    assert!(two.y_step(0).iter().all(|v| (v - 0.75).abs() < 1e-15));
    assert!(two.y_step(5).iter().all(|v| (v - 0.5).abs() < 1e-15));
    let merged = apply_measure_atoms(&sol, &[(4, vec![0.25]), (4, vec![0.5])]).unwrap();
    assert_eq!(merged.applied_atoms.len(), 1);
    assert!(merged.y_step(4).iter().all(|v| (v - 0.75).abs() < 1e-15));
    assert!(apply_measure_atoms(&sol, &[(11, vec![1.0])]).is_err());
}

#[test]
fn terminal_condition_is_exact_and_centered_terminal_has_zero_mean() {
    let ens = lq_ensemble(20, 2000);
    let (c, m) = none(&ens);
    let sol = solve_backward(&ens, &lq_dynamics(), &lq_driver(true), &m, &c, RegressionBasis::default()).unwrap();
    let mx = ens.mean_x_at(20)[0];
    for i in 0..2000 {
        assert_eq!(sol.y_at(20, i)[0], ens.state(20, i)[0] - mx);
    }
    assert!(sol.mean_y(20)[0].abs() < 1e-14);
    assert!(sol.r_squared.iter().all(|r| *r > 0.999));
}

#[test]
fn superposition_for_linear_driver() {
    let ens = lq_ensemble(20, 1000);
    let (c, m) = none(&ens);
    let d = |g: fn(&[f64], &[f64]) -> f64| {
        DriverSpec::new(
            |a, out| out[0] = 0.3 * a.y[0] + 0.2 * a.mean_y[0] + 0.1 * a.z[0] + 0.05 * a.mean_z[0],
            move |x, mx, out| out[0] = g(x, mx),
            true,
        )
    };
    let run = |s: DriverSpec| solve_backward(&ens, &lq_dynamics(), &s, &m, &c, RegressionBasis::default()).unwrap();
    let a = run(d(|x, _| x[0]));
    let b = run(d(|x, mx| x[0] - mx[0] + 1.0));
    let ab = run(d(|x, mx| 2.0 * x[0] - 3.0 * (x[0] - mx[0] + 1.0)));
    for (v, (p, q)) in ab.y.iter().zip(a.y.iter().zip(&b.y)) {
        assert_abs_diff_eq!(*v, 2.0 * p - 3.0 * q, epsilon = 1e-8);
    }
    for (v, (p, q)) in ab.z.iter().zip(a.z.iter().zip(&b.z)) {
        assert_abs_diff_eq!(*v, 2.0 * p - 3.0 * q, epsilon = 1e-8);
    }
}

#[test]
fn residual_is_first_order_and_detects_corrupted_z() {
    let res = |steps: usize| {
        let ens = lq_ensemble(steps, 4000);
        let (c, m) = none(&ens);
        let spec = lq_driver(true);
        let sol = solve_backward(&ens, &lq_dynamics(), &spec, &m, &c, RegressionBasis::default()).unwrap();
        let base = bsde_residual(&ens, &lq_dynamics(), &spec, &m, &c, &sol).unwrap();
        let mut bad = sol.clone();
        bad.z.iter_mut().for_each(|z| *z *= 2.0);
        let corrupted = bsde_residual(&ens, &lq_dynamics(), &spec, &m, &c, &bad).unwrap();
        (base, corrupted)
    };
    let (r1, c1) = res(50);
    let (r2, _) = res(100);
    let ratio = r2 / r1;
    assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    assert!(c1 > 2.0 * r1, "{c1} vs {r1}");
}

/// Two-dimensional Brownian motion without drift.
struct Planar;

impl MeanFieldDynamics for Planar {
    fn dims(&self) -> Dims {
        Dims { state: 2, control: 1, noise: 2 }
    }
    fn drift(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.5, 1.0]);
    }
    fn jacobians(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64]) -> CoefficientJacobians {
        CoefficientJacobians { drift: Partials::zeros(2, 1), diffusion: vec![Partials::zeros(2, 1); 2] }
    }
}

#[test]
fn vector_state_linear_terminal_is_exact() {
    let s = setup(10, 300, InitialLaw::Gaussian { mean: vec![0.0, 1.0], variance: vec![1.0, 1.0] });
    let ens = simulate_forward(&Planar, &ControlPolicy::constant(vec![0.0]), &s).unwrap();
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|x, _, out| {
        out[0] = x[0] + 2.0 * x[1];
        out[1] = x[0];
    });
    let sol = solve_backward(&ens, &Planar, &spec, &m, &c, RegressionBasis::default()).unwrap();
    // Z = grad(y) sigma with grad = [[1, 2], [1, 0]], sigma = [[1, 0], [0.5, 1]].
    let want = [2.0, 2.0, 1.0, 0.0];
    for k in 0..10 {
        for i in 0..300 {
            let x = ens.state(k, i);
            assert_abs_diff_eq!(sol.y_at(k, i)[0], x[0] + 2.0 * x[1], epsilon = 1e-8);
            for (z, w) in sol.z_at(k, i).iter().zip(want) {
                assert_abs_diff_eq!(*z, w, epsilon = 1e-8);
            }
        }
    }
    let bad = solve_backward(&ens, &Planar, &spec, &m, &c, RegressionBasis { degree: 2 });
    assert!(matches!(bad, Err(Error::InvalidInput(_))));
}

#[test]
fn non_finite_driver_reports_step() {
    let ens = brownian_ensemble(5, 10);
    let (c, m) = none(&ens);
    let spec = DriverSpec::new(|_, out| out[0] = f64::NAN, |_, _, out| out[0] = 0.0, true);
    let err = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 4, .. }), "{err}");
}

#[test]
fn residual_report_serializes() {
    let ens = brownian_ensemble(4, 10);
    let (c, m) = none(&ens);
    let spec = DriverSpec::martingale(|x, _, out| out[0] = x[0]);
    let sol = solve_backward(&ens, &brownian(), &spec, &m, &c, RegressionBasis::default()).unwrap();
    let json = serde_json::to_value(sol.residual_report(Some(0.0))).unwrap();
    assert_eq!(json["max_degree_used"], 1);
    assert_eq!(json["regression_residuals"].as_array().unwrap().len(), 4);
}

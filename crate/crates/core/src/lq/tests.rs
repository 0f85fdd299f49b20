use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::smp::min_condition_residual;

fn small() -> SolverSettings {
    SolverSettings { steps: 50, particles: 4000, seed: 7, max_iter: 60, damping: 0.5, tol: 1e-4 }
}

#[test]
fn riccati_trivial_cases() {
    let mut m = LqModel::benchmark();
    m.q = 0.0;
    m.ell = 0.0;
    let r = riccati_solve(&m, 50).unwrap();
    assert!(r.beta.iter().chain(&r.zeta).chain(&r.gain_fluctuation).chain(&r.gain_mean).all(|v| *v == 0.0));

    let mut m = LqModel::benchmark();
    m.ell = 0.0;
    m.b[1] = 0.0;
    let r = riccati_solve(&m, 50).unwrap();
    assert!(r.zeta.iter().all(|z| z.abs() < 1e-12));

    let r = riccati_solve(&LqModel::benchmark(), 50).unwrap();
    assert_eq!(r.beta[50], 1.0);
    assert_eq!(r.zeta[50], -1.0);
}

#[test]
fn riccati_matches_discrete_oracle() {
    let m = LqModel::benchmark();
    let ric = riccati_solve(&m, 1000).unwrap();
    let ora = lq_oracle_discrete(&m, 1e-3).unwrap();
    assert_abs_diff_eq!(ric.value, 0.32562218, epsilon = 1e-7);
    assert_abs_diff_eq!(ora.value, 0.32579633, epsilon = 1e-7);
    assert!((ric.value - ora.value).abs() / ora.value < 5e-3);
    let kmax = ric.gain_fluctuation.iter().map(|k| k.abs()).fold(0.0, f64::max);
    let lmax = ric.gain_mean.iter().map(|k| k.abs()).fold(0.0, f64::max);
    for k in 0..1000 {
        assert!((ric.gain_fluctuation[k] - ora.fluctuation_gains[k]).abs() < 5e-3 * kmax, "node {k}");
        assert!((ric.gain_mean[k] - ora.mean_gains[k]).abs() < 5e-3 * lmax, "node {k}");
    }
    // First-order convergence of the oracle towards the continuous value.
    let e1 = (lq_oracle_discrete(&m, 1e-2).unwrap().value - ric.value).abs();
    let e2 = (lq_oracle_discrete(&m, 5e-3).unwrap().value - ric.value).abs();
    let order = (e1 / e2).log2();
    assert!((0.8..1.2).contains(&order), "order {order}");
}

#[test]
fn oracle_zero_weights_and_single_step_by_hand() {
    let mut m = LqModel::benchmark();
    m.q = 0.0;
    m.ell = 0.0;
    assert_eq!(lq_oracle_discrete(&m, 0.1).unwrap().value, 0.0);

    // One step of length 1: X_1 = X_0 + b dt + sigma xi with u = K y + L m.
    let m = LqModel {
        b: [0.3, -0.2, 0.7, 0.4],
        s: [0.5, 0.1, 0.6, -0.3],
        q: 1.5,
        v: 0.8,
        ell: 2.0,
        horizon: 1.0,
        m0: 0.9,
        v0: 0.3,
        h: Slope::Constant(0.0),
        constrained: false,
    };
    let [b1, b2, b3, b4] = m.b;
    let [s1, s2, s3, s4] = m.s;
    let cost = |k: f64, l: f64| {
        let running = 0.5 * (m.q * (m.v0 + m.m0 * m.m0) + m.v * (k * k * m.v0 + l * l * m.m0 * m.m0));
        let var = (1.0 + b1 + b3 * k).powi(2) * m.v0
            + (s1 + s3 * k).powi(2) * m.v0
            + ((s1 + s2) + (s3 + s4) * l).powi(2) * m.m0 * m.m0;
        running + 0.5 * m.ell * var
    };
    let k = -m.ell * ((1.0 + b1) * b3 + s1 * s3) / (m.v + m.ell * (b3 * b3 + s3 * s3));
    let l = -m.ell * (s1 + s2) * (s3 + s4) / (m.v + m.ell * (s3 + s4).powi(2));
    let _ = (b2, b4);
    let ora = lq_oracle_discrete(&m, 1.0).unwrap();
    assert_abs_diff_eq!(ora.value, cost(k, l), epsilon = 1e-12);
    assert_abs_diff_eq!(ora.fluctuation_gains[0], k, epsilon = 1e-12);
    assert_abs_diff_eq!(ora.mean_gains[0], l, epsilon = 1e-12);
    for d in [-1e-3, 1e-3] {
        assert!(cost(k + d, l) > cost(k, l) && cost(k, l + d) > cost(k, l));
    }
    assert!(lq_oracle_discrete(&m, 0.3).is_err());
}

#[test]
fn riccati_blowup_is_reported() {
    let mut m = LqModel::benchmark();
    m.b = [10.0, 0.0, 0.0, 0.0];
    assert!(matches!(riccati_solve(&m, 100), Err(Error::RiccatiBlowup { .. })));
}

#[test]
fn kkt_examples() {
    assert_eq!(pointwise_kkt_control(2.0, 1.0, 0.5), (1.0, 0.5));
    assert_eq!(pointwise_kkt_control(-1.0, 1.0, 0.5), (-1.0, 0.0));
    assert_eq!(pointwise_kkt_control(0.7, 0.7, 0.5), (0.7, 0.0));
}

proptest! {
    #[test]
    fn kkt_system_holds_exactly(u in -1e3f64..1e3, hx in -1e3f64..1e3, v in 1e-3f64..1e3) {
        let (a, eta) = pointwise_kkt_control(u, hx, v);
        prop_assert!(eta >= 0.0);
        prop_assert!(hx - a >= 0.0);
        prop_assert_eq!(eta * (hx - a), 0.0);
        let stationarity = v * a - v * u + eta;
        prop_assert!(stationarity.abs() <= 1e-12 * (1.0 + (v * u).abs()));
    }
}

#[test]
fn zero_weights_converge_immediately() {
    let mut m = LqModel::benchmark();
    m.q = 0.0;
    m.ell = 0.0;
    let out = solve_unconstrained(&m, &small()).unwrap();
    assert_eq!(out.report.iterations, 1);
    assert!(out.report.converged);
    assert!(out.ensemble.controls.iter().all(|a| *a == 0.0));
    assert!(out.adjoint.y.iter().chain(&out.adjoint.z).all(|v| *v == 0.0));
}

#[test]
fn unconstrained_benchmark_matches_riccati() {
    let m = LqModel::benchmark();
    let out = solve_unconstrained(&m, &small()).unwrap();
    let r = &out.report;
    assert!(r.converged, "{:?}", r.residual_history);
    let reference = r.reference_value.unwrap();
    assert!((r.cost.value - reference).abs() / reference < 0.015, "{} vs {reference}", r.cost.value);
    assert!(r.smp.min_condition_residual < 5e-3, "{}", r.smp.min_condition_residual);
    assert!(r.min_r_squared > 0.999);
    assert_eq!(r.smp.r0, 1.0);
    assert!(out.adjoint.mean_y(50)[0].abs() < 1e-14);

    // Adjoint at t = 0 against Y = beta X + zeta E[X].
    let ric = riccati_solve(&m, 50).unwrap();
    let ens = &out.ensemble;
    let mean_x0 = ens.mean_x_at(0)[0];
    let ey0 = out.adjoint.mean_y(0)[0];
    assert!((ey0 - ric.gamma[0] * mean_x0).abs() < 0.03 * ric.gamma[0] * mean_x0);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..ens.particles {
        let dx = ens.state(0, i)[0] - mean_x0;
        sxy += dx * (out.adjoint.y_at(0, i)[0] - ey0);
        sxx += dx * dx;
    }
    assert!((sxy / sxx - ric.beta[0]).abs() < 0.03 * ric.beta[0]);

    // A constant shift of the control moves G by v times the shift.
    let mut shifted = out.ensemble.clone();
    shifted.controls.iter_mut().for_each(|a| *a += 0.1);
    let spec = ConstraintSpec::none();
    let res = min_condition_residual(
        &shifted,
        &out.adjoint,
        &out.multipliers,
        &spec,
        &m.dynamics(),
        &m.cost(),
        &BoxSet::unbounded(1),
    )
    .unwrap();
    assert!(res >= 0.1 * m.v - r.smp.min_condition_residual, "{res}");
}

#[test]
fn z_does_not_enter_the_control_without_control_in_diffusion() {
    let m = LqModel::benchmark();
    let out = solve_unconstrained(&m, &SolverSettings { particles: 500, steps: 20, ..small() }).unwrap();
    let before = desired_control(&m, false, &out.ensemble, &out.adjoint);
    let mut adj = out.adjoint.clone();
    adj.z.iter_mut().for_each(|z| *z = 3.0 * *z + 1.0);
    assert_eq!(before, desired_control(&m, false, &out.ensemble, &adj));
}

#[test]
fn huge_slope_reproduces_unconstrained_solution() {
    let mut m = LqModel::benchmark();
    m.h = Slope::Constant(1e6);
    let s = SolverSettings { particles: 2000, ..small() };
    let free = solve_unconstrained(&m, &s).unwrap();
    let con = solve_constrained(&m, &s).unwrap();
    assert_eq!(con.report.active_fraction, 0.0);
    assert!((free.report.cost.value - con.report.cost.value).abs() < free.report.cost.ci_halfwidth);
}

#[test]
fn binding_constraint_produces_multiplier_and_stays_feasible() {
    let mut m = LqModel::benchmark();
    m.m0 = -1.0;
    m.h = Slope::Constant(0.0);
    let s = SolverSettings { particles: 2000, ..small() };
    let free = solve_unconstrained(&m, &s).unwrap();
    let out = solve_constrained(&m, &s).unwrap();
    let r = &out.report;
    assert!(r.converged, "{:?}", r.residual_history);
    assert!(r.active_fraction > 0.1, "{}", r.active_fraction);
    assert!(r.feasibility_quantiles[0].1 >= -1e-12);
    assert!(r.slackness_integral < 1e-3 * (1.0 + r.eta_norm), "{}", r.slackness_integral);
    assert!(r.smp.min_condition_residual < 5e-3, "{}", r.smp.min_condition_residual);
    assert!((r.smp.normalization_error) < 1e-8);
    assert!(r.smp.r0 < 1.0);
    let floor = free.report.cost.value - 2.0 * (free.report.cost.ci_halfwidth + r.cost.ci_halfwidth);
    assert!(r.cost.value >= floor);
}

#[test]
fn benchmark_slope_keeps_slackness_and_cost_order() {
    let mut m = LqModel::benchmark();
    m.constrained = true;
    let s = SolverSettings { particles: 2000, ..small() };
    let free = solve_unconstrained(&m, &s).unwrap();
    let out = solve_constrained(&m, &s).unwrap();
    let r = &out.report;
    assert!(r.slackness_integral < 1e-3 * (1.0 + r.eta_norm));
    assert!(r.cost.value >= free.report.cost.value - 2.0 * free.report.cost.ci_halfwidth);
}

#[test]
fn game_without_mean_coupling_needs_one_outer_iteration() {
    let mut m = LqModel::benchmark();
    m.b[1] = 0.0;
    let out = mfg_solve(&m, &SolverSettings { particles: 1000, ..small() }, 20, 1e-3).unwrap();
    assert_eq!(out.outer_iterations, 1);
    assert!(out.converged);
}

#[test]
fn game_benchmark_reaches_consistency() {
    let m = LqModel::benchmark();
    let out = mfg_solve(&m, &SolverSettings { particles: 1000, ..small() }, 20, 1e-3).unwrap();
    assert!(out.converged, "{:?}", out.consistency_history);
    assert!(*out.consistency_history.last().unwrap() < 1e-3);
    let once = mfg_solve(&m, &SolverSettings { particles: 500, ..small() }, 20, f64::INFINITY).unwrap();
    assert_eq!(once.outer_iterations, 1);
    assert!(once.converged);
}

#[test]
fn slope_table_interpolates() {
    let h = Slope::Table(vec![(0.0, 1.0), (1.0, 3.0)]);
    assert_eq!(h.at(-1.0), 1.0);
    assert_eq!(h.at(0.25), 1.5);
    assert_eq!(h.at(2.0), 3.0);
    let mut m = LqModel::benchmark();
    m.h = Slope::Table(vec![(1.0, 1.0), (0.0, 3.0)]);
    assert!(m.validate().is_err());
    m.h = Slope::Constant(0.0);
    m.v = 0.0;
    assert!(m.validate().is_err());
}

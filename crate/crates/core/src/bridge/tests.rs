use approx::assert_abs_diff_eq;

use super::*;
use crate::cones::BoxSet;
use crate::fj::{brute_force_minimize, evaluate_fj_residual};

fn constrained(h: f64, x0: f64) -> DeterministicLq {
    DeterministicLq { h: Some(Slope::Constant(h)), x0, ..DeterministicLq::benchmark() }
}

#[test]
fn layout_and_structure() {
    let p = discretize(&DeterministicLq::benchmark(), 4).unwrap();
    assert_eq!(p.nlp.dim, 9);
    assert_eq!(p.nlp.equalities.len(), 2);
    assert!(p.nlp.inequalities.is_empty());
    let z = vec![0.0; 9];
    assert_eq!((p.nlp.equalities[0])(&z).0.len(), 4);
    assert_eq!((p.nlp.equalities[1])(&z).0, vec![-1.0]);

    let p = discretize(&constrained(0.5, 1.0), 4).unwrap();
    assert_eq!(p.nlp.inequalities.len(), 1);
    assert_eq!(p.nlp.inequalities[0].cone, ConeSpec::orthant(4).unwrap());
    let (g, jac) = (p.nlp.inequalities[0].map)(&z);
    assert_eq!(g.len(), 4);
    assert_eq!((jac[(1, 1)], jac[(1, 6)]), (-0.5, 1.0));
}

#[test]
fn single_step_hand_example() {
    // b = u, f = u^2, g = x^2, x0 = 0 on one unit step: optimum u = 0.
    let s = DeterministicLq {
        a: 0.0,
        c: 1.0,
        q: 0.0,
        v: 2.0,
        ell: 2.0,
        terminal_slope: 0.0,
        x0: 0.0,
        horizon: 1.0,
        h: None,
    };
    let p = discretize(&s, 1).unwrap();
    let sol = p.solve().unwrap();
    assert_eq!(sol.decision(), vec![0.0, 0.0, 0.0]);
    let boxed = p.nlp.clone().with_box(BoxSet::cube(3, -1.0, 1.0).unwrap());
    let grid = brute_force_minimize(&boxed, &[21, 21, 21], 1e-12).unwrap();
    for v in grid {
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }
}

#[test]
fn two_step_qp_matches_grid_search() {
    let s = DeterministicLq { x0: 0.8, ..DeterministicLq::benchmark() };
    let p = discretize(&s, 2).unwrap();
    let sol = p.solve().unwrap();
    let eval = |u: &[f64]| {
        let x = p.rollout(u);
        (p.nlp.objective)(&x.iter().chain(u).copied().collect::<Vec<_>>()).0
    };
    let h = 0.002;
    let mut best = (f64::INFINITY, [0.0; 2]);
    for i in 0..=1000 {
        for j in 0..=1000 {
            let u = [-1.0 + h * i as f64, -1.0 + h * j as f64];
            let f = eval(&u);
            if f < best.0 {
                best = (f, u);
            }
        }
    }
    assert!(sol.value <= best.0 + 1e-14);
    for (a, b) in sol.u.iter().zip(best.1) {
        assert!((a - b).abs() <= h, "{a} vs {b}");
    }
}

/// Discrete adjoint recursion evaluated directly on the solution.
fn discrete_adjoint(p: &DiscreteControlProblem, sol: &DiscreteSolution) -> Vec<f64> {
    let s = &p.scenario;
    let m = p.steps;
    let h: Vec<f64> = (0..m).map(|k| s.slope(k as f64 * p.dt).unwrap_or(0.0)).collect();
    let lam = |k: usize| sol.lambda.get(k).copied().unwrap_or(0.0);
    let mut mu = vec![0.0; m];
    mu[m - 1] = s.ell * sol.x[m] + s.terminal_slope;
    for k in (0..m - 1).rev() {
        mu[k] = (1.0 + s.a * p.dt) * mu[k + 1] + p.dt * s.q * sol.x[k + 1] - h[k + 1] * lam(k + 1);
    }
    mu
}

#[test]
fn certificates_are_stationary_and_match_the_discrete_adjoint() {
    let cases = [
        (DeterministicLq::benchmark(), 5),
        (DeterministicLq::benchmark(), 25),
        (constrained(0.0, -1.0), 10),
        (constrained(0.0, -1.0), 25),
        (constrained(0.5, 1.0), 25),
        (constrained(-0.8, 1.0), 20),
    ];
    for (s, m) in cases {
        let p = discretize(&s, m).unwrap();
        let sol = p.solve().unwrap();
        let rec = p.certificate(&sol).unwrap();
        assert!(rec.normal);
        assert!(rec.stationarity_residual < 1e-8, "{m}: {}", rec.stationarity_residual);
        let rep = evaluate_fj_residual(&p.nlp, &sol.decision(), &rec.certificate, 1e-8).unwrap();
        assert!(rep.dual_feasible);
        assert!(rep.max_slackness() < 1e-8);
        assert_abs_diff_eq!(rep.normalization_error, 0.0, epsilon = 1e-10);

        let cert = rec.certificate.scaled(1.0 / rec.certificate.r0);
        for (a, b) in cert.mus[0].iter().zip(discrete_adjoint(&p, &sol)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-7);
        }
        if let Some(l) = cert.lambdas.first() {
            for (a, b) in l.iter().zip(&sol.lambda) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-7);
            }
        }
    }
}

#[test]
fn constrained_solution_is_feasible_and_binding() {
    let p = discretize(&constrained(0.0, -1.0), 20).unwrap();
    let sol = p.solve().unwrap();
    assert!(sol.u.iter().all(|u| *u <= 1e-12));
    assert!(sol.lambda.iter().all(|l| *l >= 0.0));
    assert!(sol.lambda.iter().filter(|l| **l > 1e-6).count() > 10);
    for (u, l) in sol.u.iter().zip(&sol.lambda) {
        assert!((u * l).abs() < 1e-12);
    }
    // The constrained optimum cannot beat the unconstrained one.
    let free = discretize(&DeterministicLq { h: None, ..p.scenario.clone() }, 20).unwrap().solve().unwrap();
    assert!(sol.value >= free.value);
}

#[test]
fn benchmark_converges_at_first_order() {
    let table = convergence_study(&DeterministicLq::benchmark(), &[0.1, 0.05, 0.025, 0.0125]).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows[0].order_estimate.is_none());
    for w in table.rows.windows(2) {
        let ratio = w[1].sup_error / w[0].sup_error;
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }
    let slope = table.slope.unwrap();
    assert!((0.8..=1.2).contains(&slope), "slope {slope}");
    assert!(table.rows[3].transversality_error < 0.05);
    assert!(table.rows.iter().all(|r| r.stationarity_residual < 1e-8));
}

#[test]
fn zero_cost_has_zero_multipliers() {
    let s = DeterministicLq { q: 0.0, ell: 0.0, ..DeterministicLq::benchmark() };
    let (cmp, rec) = bridge_run(&s, 0.1).unwrap();
    assert_eq!(rec.certificate.r0, 1.0);
    assert!(cmp.discrete.iter().all(|m| *m == 0.0));
    assert!(cmp.adjoint.iter().all(|m| *m == 0.0));
    assert_eq!(cmp.sup_error, 0.0);
}

#[test]
fn exact_problem_reports_no_slope() {
    // No curvature in the state: the adjoint is constant and the discrete
    // multipliers reproduce it exactly.
    let s = DeterministicLq {
        a: 0.0,
        c: 0.0,
        q: 0.0,
        ell: 0.0,
        terminal_slope: 1.0,
        ..DeterministicLq::benchmark()
    };
    let table = convergence_study(&s, &[0.1, 0.05, 0.025]).unwrap();
    assert!(table.rows.iter().all(|r| r.sup_error < 1e-10 && r.order_estimate.is_none()));
    assert!(table.slope.is_none());
}

#[test]
fn single_dt_gives_one_row_without_slope() {
    let table = convergence_study(&DeterministicLq::benchmark(), &[0.05]).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table.slope.is_none());
    assert!(table.rows[0].order_estimate.is_none());
}

#[test]
fn constrained_eta_matches_on_active_arcs() {
    let s = constrained(0.0, -1.0);
    let mut last = f64::INFINITY;
    for dt in [0.1, 0.05, 0.025] {
        let (cmp, _) = bridge_run(&s, dt).unwrap();
        assert_eq!(cmp.active_nodes, cmp.discrete.len());
        let e = cmp.eta_sup_error.unwrap();
        assert!(e < last, "{e} !< {last}");
        last = e;
        assert!(cmp.sup_error < 0.5);
    }
    assert!(last < 0.05);
}

#[test]
fn sweep_reference_matches_riccati_when_slack() {
    let s = DeterministicLq::benchmark();
    let a = adjoint_reference(&s, 10).unwrap();
    let b = adjoint_reference(&DeterministicLq { h: Some(Slope::Constant(1e6)), ..s }, 10).unwrap();
    for (x, y) in a.adjoint.iter().zip(&b.adjoint) {
        assert_abs_diff_eq!(*x, *y, epsilon = 1e-4);
    }
    assert!(b.eta.iter().all(|e| *e == 0.0));
    assert_abs_diff_eq!(a.adjoint[10], a.state[10], epsilon = 1e-14);
}

#[test]
fn abnormal_certificate_is_rejected() {
    let p = discretize(&DeterministicLq::benchmark(), 4).unwrap();
    let cert = FjCertificate { r0: 0.0, lambdas: vec![], mus: vec![vec![0.2; 4], vec![0.2]], xi: vec![0.0; 9] };
    let reference = adjoint_reference(&p.scenario, 4).unwrap();
    assert!(matches!(compare_multipliers(&p, &cert, &reference), Err(Error::Abnormal)));
}

#[test]
fn preconditions() {
    assert!(DeterministicLq::from_model(&LqModel::benchmark()).is_err());
    let mut m = LqModel::benchmark();
    m.s = [0.0; 4];
    m.v0 = 0.0;
    let d = DeterministicLq::from_model(&m).unwrap();
    assert_abs_diff_eq!(d.a, -0.3, epsilon = 1e-15);
    assert_eq!((d.c, d.ell, d.h.is_none()), (1.0, 0.0, true));
    assert!(convergence_study(&d, &[0.05, 0.1]).is_err());
    assert!(convergence_study(&d, &[]).is_err());
    assert!(bridge_run(&d, 0.3).is_err());
}

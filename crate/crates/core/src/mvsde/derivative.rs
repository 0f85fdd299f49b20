//! Exact pathwise adjoint of the particle system and the finite-difference
//! check of the cost's directional derivative.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{
    simulate_with_noise, BrownianNoise, ControlPolicy, CostFunctional, MeanFieldDynamics, ParticleEnsemble,
    Partials, SimulationSetup,
};
use crate::error::{check_dim, Result};
use crate::linalg::{column_means, pairwise_sum};
use crate::par;

/// Gradient of the empirical cost with respect to every control value,
/// scaled by `N`: `dJ/du_k^i = G_k^i / N`. Entries at the terminal step are 0.
///
/// This is the exact derivative of the Euler particle system, including the
/// `1/N` cross-particle terms coming through the empirical means.
pub fn cost_gradient(
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
    ens: &ParticleEnsemble,
) -> Vec<f64> {
    let d = ens.dims;
    let (n, l, r) = (d.state, d.control, d.noise);
    let (np, m) = (ens.particles, ens.grid.steps());
    let dt = ens.grid.dt();
    let mut grad = vec![0.0; (m + 1) * np * l];

    // Terminal adjoint P_M^i = g_x^i + E_N[g_m].
    let term: Vec<(Vec<f64>, Vec<f64>)> =
        par::map_range(np, |i| cost.terminal_gradient(ens.state(m, i), ens.mean_x_at(m)));
    let gm: Vec<f64> = term.iter().flat_map(|(_, gm)| gm.iter().copied()).collect();
    let gm_mean = column_means(&gm, n);
    let mut p: Vec<f64> = term
        .iter()
        .flat_map(|(gx, _)| gx.iter().zip(&gm_mean).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect();

    // Effective one-step linearization: A = J.drift * dt + sum_j J.diffusion[j] * dW_j.
    let combine = |pa: &Partials, pick: fn(&Partials) -> &DMatrix<f64>, acc: &mut DMatrix<f64>, w: f64| {
        *acc += pick(pa) * w;
    };

    for k in (0..m).rev() {
        let t = ens.grid.t(k);
        let pk1 = &p;
        let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(np, |i| {
            let x = ens.state(k, i);
            let u = ens.control(k, i);
            let mx = ens.mean_x_at(k);
            let ma = ens.mean_a_at(k);
            let jac = dynamics.jacobians(t, x, mx, ma, u);
            let fg = cost.running_gradient(t, x, mx, ma, u);
            let w = ens.increment(k, i);
            let mut ax = DMatrix::zeros(n, n);
            let mut amx = DMatrix::zeros(n, n);
            let mut au = DMatrix::zeros(n, l);
            let mut ama = DMatrix::zeros(n, l);
            combine(&jac.drift, |p| &p.x, &mut ax, dt);
            combine(&jac.drift, |p| &p.mean_x, &mut amx, dt);
            combine(&jac.drift, |p| &p.u, &mut au, dt);
            combine(&jac.drift, |p| &p.mean_a, &mut ama, dt);
            for (j, col) in jac.diffusion.iter().enumerate().take(r) {
                combine(col, |p| &p.x, &mut ax, w[j]);
                combine(col, |p| &p.mean_x, &mut amx, w[j]);
                combine(col, |p| &p.u, &mut au, w[j]);
                combine(col, |p| &p.mean_a, &mut ama, w[j]);
            }
            let pn = DVector::from_column_slice(&pk1[i * n..(i + 1) * n]);
            let fx = DVector::from_column_slice(&fg.x);
            let local_x = &pn + fx * dt + ax.transpose() * &pn;
            let cross_x = DVector::from_column_slice(&fg.mean_x) * dt + amx.transpose() * &pn;
            let local_u = DVector::from_column_slice(&fg.u) * dt + au.transpose() * &pn;
            let cross_u = DVector::from_column_slice(&fg.mean_a) * dt + ama.transpose() * &pn;
            (
                local_x.as_slice().to_vec(),
                cross_x.as_slice().to_vec(),
                local_u.as_slice().to_vec(),
                cross_u.as_slice().to_vec(),
            )
        });
        let cx: Vec<f64> = parts.iter().flat_map(|t| t.1.iter().copied()).collect();
        let cu: Vec<f64> = parts.iter().flat_map(|t| t.3.iter().copied()).collect();
        let cx_mean = column_means(&cx, n);
        let cu_mean = column_means(&cu, l);
        let mut next_p = vec![0.0; np * n];
        for (i, part) in parts.iter().enumerate() {
            for a in 0..n {
                next_p[i * n + a] = part.0[a] + cx_mean[a];
            }
            for b in 0..l {
                grad[(k * np + i) * l + b] = part.2[b] + cu_mean[b];
            }
        }
        p = next_p;
    }
    grad
}

/// Analytic derivative versus central differences for several `eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub analytic: f64,
    /// `(eps, central difference, relative error)`.
    pub central_differences: Vec<(f64, f64, f64)>,
}

impl DerivativeCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.central_differences.iter().map(|c| c.2).fold(0.0, f64::max)
    }
}

/// Compares `(J(a + eps K) - J(a - eps K)) / 2 eps` with `<D J(a), K>` for an
/// open-loop control array `controls` and direction `direction` (same layout),
/// reusing one set of Brownian increments for every evaluation.
pub fn directional_derivative_check(
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
    setup: &SimulationSetup,
    controls: &[f64],
    direction: &[f64],
    eps: &[f64],
) -> Result<DerivativeCheck> {
    let noise = BrownianNoise::generate(setup, dynamics.dims())?;
    check_dim("direction", controls.len(), direction.len())?;
    let eval = |shift: f64| -> Result<(f64, ParticleEnsemble)> {
        let c: Vec<f64> = controls.iter().zip(direction).map(|(a, k)| a + shift * k).collect();
        let ens = simulate_with_noise(dynamics, &ControlPolicy::open_loop(c), setup, &noise)?;
        Ok((cost.evaluate(&ens).value, ens))
    };
    let (_, base) = eval(0.0)?;
    let g = cost_gradient(dynamics, cost, &base);
    let prods: Vec<f64> = g.iter().zip(direction).map(|(a, b)| a * b).collect();
    let analytic = pairwise_sum(&prods) / setup.particles as f64;

    let mut central_differences = Vec::with_capacity(eps.len());
    for &e in eps {
        let (jp, _) = eval(e)?;
        let (jm, _) = eval(-e)?;
        let fd = (jp - jm) / (2.0 * e);
        let scale = analytic.abs().max(fd.abs());
        let rel = if scale == 0.0 { 0.0 } else { (fd - analytic).abs() / scale };
        central_differences.push((e, fd, rel));
    }
    Ok(DerivativeCheck { analytic, central_differences })
}

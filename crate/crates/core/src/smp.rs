//! Checks of the constrained stochastic maximum principle on a candidate
//! `(control, adjoint, multipliers)`: the minimum-condition residual,
//! support and slackness of the multipliers, normalization and primal
//! feasibility, plus projected dual-ascent updates.

use serde::Serialize;

pub use crate::constraints::{ConstraintSpec, MultiplierSet};

use crate::bsde::AdjointSolution;
use crate::cones::BoxSet;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{column_means, pairwise_mean, pairwise_sum};
use crate::mvsde::{CostFunctional, MeanFieldDynamics, ParticleEnsemble};
use crate::par;

/// `<b, y> + tr(sigma z^T) + r0 f` with `sigma`, `z` row-major `n x r`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    t: f64,
    x: &[f64],
    mean_x: &[f64],
    mean_a: &[f64],
    u: &[f64],
    y: &[f64],
    z: &[f64],
    r0: f64,
    dynamics: &dyn MeanFieldDynamics,
    running_cost: &dyn CostFunctional,
) -> f64 {
    let d = dynamics.dims();
    let mut b = vec![0.0; d.state];
    let mut s = vec![0.0; d.state * d.noise];
    dynamics.drift(t, x, mean_x, mean_a, u, &mut b);
    dynamics.diffusion(t, x, mean_x, mean_a, u, &mut s);
    let by: f64 = b.iter().zip(y).map(|(p, q)| p * q).sum();
    let sz: f64 = s.iter().zip(z).map(|(p, q)| p * q).sum();
    by + sz + r0 * running_cost.running(t, x, mean_x, mean_a, u)
}

/// Local and mean-field parts of `d_u H` at one particle-step.
fn control_gradient_parts(
    ens: &ParticleEnsemble,
    adjoint: &AdjointSolution,
    r0: f64,
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
    k: usize,
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = ens.dims;
    let (n, l, r) = (d.state, d.control, d.noise);
    let t = ens.grid.t(k);
    let (x, u) = (ens.state(k, i), ens.control(k, i));
    let (mx, ma) = (ens.mean_x_at(k), ens.mean_a_at(k));
    let jac = dynamics.jacobians(t, x, mx, ma, u);
    let fg = cost.running_gradient(t, x, mx, ma, u);
    let y = adjoint.y_at(k, i);
    let z = adjoint.z_at(k, i);
    let mut local: Vec<f64> = fg.u.iter().map(|g| r0 * g).collect();
    let mut cross: Vec<f64> = fg.mean_a.iter().map(|g| r0 * g).collect();
    for c in 0..l {
        for a in 0..n {
            local[c] += jac.drift.u[(a, c)] * y[a];
            cross[c] += jac.drift.mean_a[(a, c)] * y[a];
            for (j, col) in jac.diffusion.iter().enumerate().take(r) {
                local[c] += col.u[(a, c)] * z[a * r + j];
                cross[c] += col.mean_a[(a, c)] * z[a * r + j];
            }
        }
    }
    (local, cross)
}

/// `G = d_u H + E'[d_nu H] - (path-kernel terms) - sum_j d_u psi^j eta^j`
/// for every particle and step `k < M`, layout `(k * N + i) * l + c`.
pub fn control_gradient(
    ens: &ParticleEnsemble,
    adjoint: &AdjointSolution,
    mult: &MultiplierSet,
    spec: &ConstraintSpec,
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
) -> Result<Vec<f64>> {
    mult.check_shape(spec, ens)?;
    check_dim("adjoint particles", ens.particles, adjoint.particles)?;
    check_dim("adjoint steps", ens.grid.steps(), adjoint.steps)?;
    let (l, np, m) = (ens.dims.control, ens.particles, ens.grid.steps());
    let mut g = vec![0.0; m * np * l];

    // Suffix sums of Phi'(gamma_s) w_s per constraint and particle.
    let path_terms: Vec<Option<Vec<f64>>> = spec
        .expectation
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            c.path.as_ref().map(|pk| {
                let gamma = spec.path_functional(idx, ens);
                let w = &mult.atoms[idx];
                let mut acc = vec![0.0; (m + 1) * np];
                for p in 0..np {
                    let mut run = 0.0;
                    for s in (0..=m).rev() {
                        if w[s] != 0.0 {
                            run += (pk.outer_derivative)(gamma[s * np + p]) * w[s];
                        }
                        acc[s * np + p] = run;
                    }
                }
                acc
            })
        })
        .collect();

    for k in 0..m {
        let t = ens.grid.t(k);
        let parts = par::map_range(np, |i| control_gradient_parts(ens, adjoint, mult.r0, dynamics, cost, k, i));
        let cross: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
        let cross_mean = column_means(&cross, l);
        for (i, (local, _)) in parts.iter().enumerate() {
            let out = &mut g[(k * np + i) * l..(k * np + i + 1) * l];
            for c in 0..l {
                out[c] = local[c] + cross_mean[c];
            }
            for (idx, c) in spec.expectation.iter().enumerate() {
                if let (Some(pk), Some(acc)) = (&c.path, &path_terms[idx]) {
                    let kern = (pk.kernel)(t);
                    let s = acc[k * np + i];
                    for (o, kv) in out.iter_mut().zip(kern) {
                        *o -= kv * s;
                    }
                }
            }
            for (c, eta) in spec.pathwise.iter().zip(&mult.eta) {
                let e = eta[k * np + i];
                if e != 0.0 {
                    let gu = (c.grad_u)(t, ens.state(k, i), ens.control(k, i));
                    for (o, gv) in out.iter_mut().zip(gu) {
                        *o -= gv * e;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// RMS over particle-steps `k < M` of `|alpha - Proj_U(alpha - G)|`, zero
/// exactly where the variational inequality of the minimum condition holds.
pub fn min_condition_residual(
    ens: &ParticleEnsemble,
    adjoint: &AdjointSolution,
    mult: &MultiplierSet,
    spec: &ConstraintSpec,
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
    control_box: &BoxSet,
) -> Result<f64> {
    let l = ens.dims.control;
    check_dim("control box", l, control_box.dim())?;
    let g = control_gradient(ens, adjoint, mult, spec, dynamics, cost)?;
    let m = ens.grid.steps();
    let alphas = &ens.controls[..m * ens.particles * l];
    let sq: Vec<f64> = alphas
        .chunks(l)
        .zip(g.chunks(l))
        .map(|(a, gv)| {
            let trial: Vec<f64> = a.iter().zip(gv).map(|(p, q)| p - q).collect();
            let proj = control_box.project(&trial);
            a.iter().zip(&proj).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
        })
        .collect();
    Ok(if sq.is_empty() { 0.0 } else { pairwise_mean(&sq).sqrt() })
}

/// `(support violation per expectation constraint, slackness integral per
/// pathwise constraint)`.
pub fn support_check(
    mult: &MultiplierSet,
    ens: &ParticleEnsemble,
    spec: &ConstraintSpec,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    mult.check_shape(spec, ens)?;
    let support = (0..spec.expectation.len())
        .map(|i| {
            let means = spec.expectation_means(i, ens);
            mult.atoms[i].iter().zip(&means).map(|(w, e)| w * (e.abs() - tol).max(0.0)).sum()
        })
        .collect();
    let (np, m, dt) = (ens.particles, ens.grid.steps(), ens.grid.dt());
    let slack = (0..spec.pathwise.len())
        .map(|j| {
            let psi = spec.pathwise_values(j, ens);
            let prod: Vec<f64> = psi[..m * np].iter().zip(&mult.eta[j]).map(|(p, e)| (p * e).abs()).collect();
            pairwise_sum(&prod) / np as f64 * dt
        })
        .collect();
    Ok((support, slack))
}

/// Worst violation per constraint: expectation constraints first
/// (`max_k (-E_N[phi^i(t_k)])^+`), then pathwise (`max (-psi^j)^+`).
pub fn primal_feasibility(ens: &ParticleEnsemble, spec: &ConstraintSpec) -> Vec<f64> {
    let worst = |v: &[f64]| v.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max);
    (0..spec.expectation.len())
        .map(|i| worst(&spec.expectation_means(i, ens)))
        .chain((0..spec.pathwise.len()).map(|j| worst(&spec.pathwise_values(j, ens))))
        .collect()
}

/// Scales the bundle so that `r0 + sum mu^i([0, T]) + sum ||eta^j|| = 1`.
pub fn normalize(mult: &MultiplierSet) -> Result<MultiplierSet> {
    if !mult.is_nonnegative() {
        return Err(Error::InvalidInput("multipliers must be nonnegative".into()));
    }
    let total = mult.total_mass();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidInput("all-zero multiplier bundle cannot be normalized".into()));
    }
    let mut out = mult.clone();
    out.r0 /= total;
    out.atoms.iter_mut().flatten().for_each(|w| *w /= total);
    out.eta.iter_mut().flatten().for_each(|e| *e /= total);
    Ok(out)
}

/// Projected dual ascent: `w^i_k <- (w^i_k - step E_N[phi^i(t_k)])^+`,
/// `eta^j <- (eta^j - step psi^j)^+` elementwise.
pub fn dual_ascent_update(
    mult: &MultiplierSet,
    expectation_means: &[Vec<f64>],
    pathwise_values: &[Vec<f64>],
    step: f64,
) -> Result<MultiplierSet> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("dual step must be positive, got {step}")));
    }
    check_dim("expectation constraint values", mult.atoms.len(), expectation_means.len())?;
    check_dim("pathwise constraint values", mult.eta.len(), pathwise_values.len())?;
    let mut out = mult.clone();
    for (w, phi) in out.atoms.iter_mut().zip(expectation_means) {
        check_dim("expectation values per node", w.len(), phi.len())?;
        for (a, p) in w.iter_mut().zip(phi) {
            *a = (*a - step * p).max(0.0);
        }
    }
    for (e, psi) in out.eta.iter_mut().zip(pathwise_values) {
        check_dim("pathwise values per particle-step", e.len(), psi.len())?;
        for (a, p) in e.iter_mut().zip(psi) {
            *a = (*a - step * p).max(0.0);
        }
    }
    Ok(out)
}

/// All maximum-principle diagnostics of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpReport {
    pub min_condition_residual: f64,
    pub support_violation: Vec<f64>,
    pub slackness_integral: Vec<f64>,
    pub normalization_error: f64,
    pub primal_feasibility: Vec<f64>,
    pub r0: f64,
}

/// Assembles an [`SmpReport`]; `normalization_error` is `|total mass - 1|`
/// of `mult` as given.
#[allow(clippy::too_many_arguments)]
pub fn smp_report(
    ens: &ParticleEnsemble,
    adjoint: &AdjointSolution,
    mult: &MultiplierSet,
    spec: &ConstraintSpec,
    dynamics: &dyn MeanFieldDynamics,
    cost: &dyn CostFunctional,
    control_box: &BoxSet,
    tol: f64,
) -> Result<SmpReport> {
    let min_condition_residual = min_condition_residual(ens, adjoint, mult, spec, dynamics, cost, control_box)?;
    let (support_violation, slackness_integral) = support_check(mult, ens, spec, tol)?;
    Ok(SmpReport {
        min_condition_residual,
        support_violation,
        slackness_integral,
        normalization_error: (mult.total_mass() - 1.0).abs(),
        primal_feasibility: primal_feasibility(ens, spec),
        r0: mult.r0,
    })
}

#[cfg(test)]
mod tests;

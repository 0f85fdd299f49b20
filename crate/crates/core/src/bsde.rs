//! Backward Euler solver for the constrained mean-field adjoint BSDE on a
//! particle ensemble.
//!
//! One step reads
//! `Y_k = E_k[Y_{k+1}] + dt f_k - sum_i grad phi^i(t_k, X_k) w^i_k - sum_j grad psi^j eta^j_k dt`,
//! so a measure atom at node `k` acts on every node `<= k`. Conditional
//! expectations are "regress-later": `Y_{k+1}` is projected on a polynomial
//! basis in `X_{k+1}` and the basis is then integrated exactly against the
//! Gaussian Euler transition from `X_k`. `Z_k` is the transition-weighted
//! gradient of the fitted polynomial times `sigma_k`. Both are exact when
//! `Y_{k+1}` lies in the span of the basis.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::{ConstraintSpec, MultiplierSet};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{column_means, lstsq, numerical_rank, pairwise_mean, pairwise_sum};
use crate::mvsde::{MeanFieldDynamics, ParticleEnsemble};
use crate::par;

/// Arguments of the driver at one particle-step. `z` and `mean_z` are
/// row-major `n x r`.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub mean_x: &'a [f64],
    pub mean_a: &'a [f64],
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub mean_y: &'a [f64],
    pub z: &'a [f64],
    pub mean_z: &'a [f64],
}

pub type DriverFn = Arc<dyn Fn(&DriverArgs<'_>, &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Driver and terminal condition of the adjoint equation.
///
/// `driver` is the per-particle integrand (`grad_x H` with the mean terms
/// already written through `mean_y`, `mean_z`). The optional `*_cross`
/// callbacks are averaged over particles and added to every particle, which
/// covers derivative terms in the measure argument.
#[derive(Clone)]
pub struct DriverSpec {
    pub driver: DriverFn,
    pub terminal: TerminalFn,
    pub driver_cross: Option<DriverFn>,
    pub terminal_cross: Option<TerminalFn>,
    /// Declared affinity in `(y, mean_y, z, mean_z)`.
    pub affine: bool,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("driver_cross", &self.driver_cross.is_some())
            .field("terminal_cross", &self.terminal_cross.is_some())
            .field("affine", &self.affine)
            .finish()
    }
}

impl DriverSpec {
    pub fn new<F, G>(driver: F, terminal: G, affine: bool) -> Self
    where
        F: Fn(&DriverArgs<'_>, &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            driver: Arc::new(driver),
            terminal: Arc::new(terminal),
            driver_cross: None,
            terminal_cross: None,
            affine,
        }
    }

    /// Zero driver with the given terminal condition.
    pub fn martingale<G>(terminal: G) -> Self
    where
        G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(|_, out| out.fill(0.0), terminal, true)
    }
}

/// Polynomial basis in the state: constant plus powers up to `degree`.
/// Degrees above 1 need a scalar state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 1 }
    }
}

/// `(Y, Z)` on the ensemble plus regression diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AdjointSolution {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub particles: usize,
    pub steps: usize,
    pub dt: f64,
    /// `(k * N + i) * n + a`, `M + 1` steps.
    pub y: Vec<f64>,
    /// `((k * N + i) * n + a) * r + j`, `M` steps.
    pub z: Vec<f64>,
    /// RMS misfit of the projection of `Y_{k+1}`, per step `k < M`.
    pub regression_residuals: Vec<f64>,
    pub r_squared: Vec<f64>,
    /// Basis degree actually used per step.
    pub degree_used: Vec<usize>,
    /// Atom contributions added by [`apply_measure_atoms`], merged by node.
    pub applied_atoms: BTreeMap<usize, Vec<f64>>,
}

impl AdjointSolution {
    pub fn y_at(&self, k: usize, i: usize) -> &[f64] {
        let n = self.state_dim;
        let at = (k * self.particles + i) * n;
        &self.y[at..at + n]
    }

    pub fn z_at(&self, k: usize, i: usize) -> &[f64] {
        let w = self.state_dim * self.noise_dim;
        let at = (k * self.particles + i) * w;
        &self.z[at..at + w]
    }

    pub fn y_step(&self, k: usize) -> &[f64] {
        let w = self.particles * self.state_dim;
        &self.y[k * w..(k + 1) * w]
    }

    pub fn z_step(&self, k: usize) -> &[f64] {
        let w = self.particles * self.state_dim * self.noise_dim;
        &self.z[k * w..(k + 1) * w]
    }

    pub fn mean_y(&self, k: usize) -> Vec<f64> {
        column_means(self.y_step(k), self.state_dim)
    }

    pub fn mean_z(&self, k: usize) -> Vec<f64> {
        column_means(self.z_step(k), self.state_dim * self.noise_dim)
    }

    /// Diagnostics for JSON output.
    pub fn residual_report(&self, bsde_residual: Option<f64>) -> ResidualReport {
        ResidualReport {
            regression_residuals: self.regression_residuals.clone(),
            r_squared: self.r_squared.clone(),
            degree_used: self.degree_used.clone(),
            max_degree_used: self.degree_used.iter().copied().max().unwrap_or(0),
            bsde_residual,
        }
    }
}

/// Per-step residuals and the basis degree used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub regression_residuals: Vec<f64>,
    pub r_squared: Vec<f64>,
    pub degree_used: Vec<usize>,
    pub max_degree_used: usize,
    pub bsde_residual: Option<f64>,
}

/// Least-squares fit of `Y_{k+1}` on the scaled basis of `X_{k+1}`.
struct Projection {
    degree: usize,
    center: Vec<f64>,
    /// Zero marks a coordinate dropped for having no spread.
    scale: Vec<f64>,
    /// `p x n` coefficients; rows follow [`Projection::columns`].
    coef: DMatrix<f64>,
    rms: f64,
    r_squared: f64,
}

impl Projection {
    /// Basis columns: `1`, then for scalar state `xi^1..xi^d`, otherwise the
    /// kept coordinates `xi_a`.
    fn columns(degree: usize, scale: &[f64]) -> usize {
        if scale.len() == 1 {
            if scale[0] > 0.0 {
                1 + degree
            } else {
                1
            }
        } else if degree == 0 {
            1
        } else {
            1 + scale.iter().filter(|s| **s > 0.0).count()
        }
    }

    fn features(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        if self.degree == 0 {
            return;
        }
        if x.len() == 1 {
            if self.scale[0] > 0.0 {
                let xi = (x[0] - self.center[0]) / self.scale[0];
                let mut p = 1.0;
                for _ in 0..self.degree {
                    p *= xi;
                    out.push(p);
                }
            }
        } else {
            for (a, v) in x.iter().enumerate() {
                if self.scale[a] > 0.0 {
                    out.push((v - self.center[a]) / self.scale[a]);
                }
            }
        }
    }

    fn fit(xs: &[f64], ys: &[f64], n: usize, requested: usize, step: usize) -> Result<Self> {
        let np = xs.len() / n;
        let center = column_means(xs, n);
        let mut scale = vec![0.0; n];
        let mut buf = Vec::with_capacity(np);
        for a in 0..n {
            buf.clear();
            buf.extend(xs.chunks(n).map(|x| (x[a] - center[a]).powi(2)));
            let sd = pairwise_mean(&buf).sqrt();
            scale[a] = if sd > 1e-12 * (1.0 + center[a].abs()) { sd } else { 0.0 };
        }
        let mut degree = if scale.iter().all(|s| *s == 0.0) { 0 } else { requested };
        loop {
            let mut proj = Self {
                degree,
                center: center.clone(),
                scale: scale.clone(),
                coef: DMatrix::zeros(0, 0),
                rms: 0.0,
                r_squared: 1.0,
            };
            let p = Self::columns(degree, &scale);
            let rows: Vec<Vec<f64>> = par::map_range(np, |i| {
                let mut f = Vec::with_capacity(p);
                proj.features(&xs[i * n..(i + 1) * n], &mut f);
                f
            });
            // Normal equations with pairwise reductions (schedule independent).
            let mut gram = DMatrix::zeros(p, p);
            let mut rhs = DMatrix::zeros(p, n);
            for r in 0..p {
                for c in r..p {
                    buf.clear();
                    buf.extend(rows.iter().map(|f| f[r] * f[c]));
                    let s = pairwise_sum(&buf) / np as f64;
                    gram[(r, c)] = s;
                    gram[(c, r)] = s;
                }
                for a in 0..n {
                    buf.clear();
                    buf.extend(rows.iter().enumerate().map(|(i, f)| f[r] * ys[i * n + a]));
                    rhs[(r, a)] = pairwise_sum(&buf) / np as f64;
                }
            }
            if numerical_rank(&gram, 1e-10) < p {
                if degree == 0 {
                    return Err(Error::RankDeficient { step });
                }
                degree -= 1;
                continue;
            }
            let mut coef = DMatrix::zeros(p, n);
            for a in 0..n {
                let sol = match gram.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs.column(a).into_owned()),
                    None => lstsq(&gram, &DVector::from_iterator(p, rhs.column(a).iter().copied())),
                };
                coef.set_column(a, &sol);
            }
            let fitted_sq: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    (0..n)
                        .map(|a| {
                            let fit: f64 = f.iter().enumerate().map(|(r, v)| v * coef[(r, a)]).sum();
                            (ys[i * n + a] - fit).powi(2)
                        })
                        .sum::<f64>()
                })
                .collect();
            let ymean = column_means(ys, n);
            let total_sq: Vec<f64> = ys
                .chunks(n)
                .map(|y| y.iter().zip(&ymean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
                .collect();
            let ss_res = pairwise_sum(&fitted_sq);
            let ss_tot = pairwise_sum(&total_sq);
            proj.rms = (ss_res / np as f64).sqrt();
            proj.r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
            proj.coef = coef;
            return Ok(proj);
        }
    }

    /// `E[Y_{k+1} | X_k]` and `Z_k` for one particle whose transition is
    /// `N(mu, sigma sigma^T dt)`; `sigma` row-major `n x r`. Writes `[ey | z]`.
    fn condition(&self, mu: &[f64], sigma: &[f64], r: usize, dt: f64, out: &mut [f64]) {
        let n = mu.len();
        let (ey, z) = out.split_at_mut(n);
        z.fill(0.0);
        if self.degree == 0 {
            for a in 0..n {
                ey[a] = self.coef[(0, a)];
            }
            return;
        }
        if n == 1 {
            let s = self.scale[0];
            if s == 0.0 {
                ey[0] = self.coef[(0, 0)];
                return;
            }
            // Moments of xi = m + S, S ~ N(0, v).
            let m = (mu[0] - self.center[0]) / s;
            let v = dt * sigma[..r].iter().map(|q| q * q).sum::<f64>() / (s * s);
            let d = self.degree;
            let mut gauss = vec![0.0; d + 1];
            gauss[0] = 1.0;
            for p in 2..=d {
                gauss[p] = gauss[p - 2] * (p as f64 - 1.0) * v;
            }
            let mut moments = vec![0.0; d + 1];
            for (p, slot) in moments.iter_mut().enumerate() {
                let mut binom = 1.0;
                let mut acc = 0.0;
                for i in 0..=p {
                    acc += binom * m.powi((p - i) as i32) * gauss[i];
                    binom = binom * (p - i) as f64 / (i + 1) as f64;
                }
                *slot = acc;
            }
            let mut e = 0.0;
            let mut de = 0.0;
            for p in 0..=d {
                e += self.coef[(p, 0)] * moments[p];
                if p >= 1 {
                    de += self.coef[(p, 0)] * p as f64 * moments[p - 1];
                }
            }
            ey[0] = e;
            // Stein: E[f(X) dW] = sigma dt E[f'(X)], hence Z = sigma E[f'].
            let slope = de / s;
            for j in 0..r {
                z[j] = slope * sigma[j];
            }
            return;
        }
        let mut row = 1;
        let mut grad = DMatrix::zeros(n, n); // grad[(a, b)] = dy_a / dx_b
        for a in 0..n {
            ey[a] = self.coef[(0, a)];
        }
        for b in 0..n {
            let s = self.scale[b];
            if s == 0.0 {
                continue;
            }
            let xi = (mu[b] - self.center[b]) / s;
            for a in 0..n {
                ey[a] += self.coef[(row, a)] * xi;
                grad[(a, b)] = self.coef[(row, a)] / s;
            }
            row += 1;
        }
        for a in 0..n {
            for j in 0..r {
                z[a * r + j] = (0..n).map(|b| grad[(a, b)] * sigma[b * r + j]).sum();
            }
        }
    }
}

/// `[E_k[Y_{k+1}] | Z_k]` per particle (width `n + n r`) and fit diagnostics.
fn conditional_step(
    ens: &ParticleEnsemble,
    dynamics: &dyn MeanFieldDynamics,
    k: usize,
    y_next: &[f64],
    degree: usize,
) -> Result<(Vec<f64>, Projection)> {
    let d = ens.dims;
    let (n, r, np) = (d.state, d.noise, ens.particles);
    let proj = Projection::fit(ens.states_at(k + 1), y_next, n, degree, k)?;
    let t = ens.grid.t(k);
    let dt = ens.grid.dt();
    let (mx, ma) = (ens.mean_x_at(k), ens.mean_a_at(k));
    let width = n + n * r;
    let mut out = vec![0.0; np * width];
    par::for_each_chunk(
        &mut out,
        width,
        || (vec![0.0; n], vec![0.0; n * r]),
        |(b, s), i, chunk| {
            let x = ens.state(k, i);
            let u = ens.control(k, i);
            dynamics.drift(t, x, mx, ma, u, b);
            dynamics.diffusion(t, x, mx, ma, u, s);
            for a in 0..n {
                b[a] = x[a] + b[a] * dt;
            }
            proj.condition(b, s, r, dt, chunk);
        },
    );
    Ok((out, proj))
}

fn validate(
    ens: &ParticleEnsemble,
    dynamics: &dyn MeanFieldDynamics,
    mult: &MultiplierSet,
    constraints: &ConstraintSpec,
    basis: RegressionBasis,
) -> Result<()> {
    check_dim("dynamics dimensions", ens.dims.state, dynamics.dims().state)?;
    check_dim("dynamics noise", ens.dims.noise, dynamics.dims().noise)?;
    mult.check_shape(constraints, ens)?;
    if basis.degree > 1 && ens.dims.state > 1 {
        return Err(Error::InvalidInput(format!(
            "basis degree {} needs a scalar state (state dimension {})",
            basis.degree, ens.dims.state
        )));
    }
    if basis.degree > 8 {
        return Err(Error::InvalidInput(format!("basis degree {} above the supported 8", basis.degree)));
    }
    Ok(())
}

/// Constraint jump at node `k` for particle `i`: the `grad phi . w` atom part
/// plus the `grad psi . eta dt` part (the latter only for `k < M`).
fn constraint_term(
    ens: &ParticleEnsemble,
    mult: &MultiplierSet,
    constraints: &ConstraintSpec,
    k: usize,
    i: usize,
    out: &mut [f64],
) {
    out.fill(0.0);
    let t = ens.grid.t(k);
    let x = ens.state(k, i);
    for (c, w) in constraints.expectation.iter().zip(&mult.atoms) {
        if w[k] != 0.0 {
            for (o, g) in out.iter_mut().zip((c.state_gradient)(t, x)) {
                *o += g * w[k];
            }
        }
    }
    if k < ens.grid.steps() {
        let dt = ens.grid.dt();
        let u = ens.control(k, i);
        for (c, eta) in constraints.pathwise.iter().zip(&mult.eta) {
            let e = eta[k * ens.particles + i];
            if e != 0.0 {
                for (o, g) in out.iter_mut().zip((c.grad_x)(t, x, u)) {
                    *o += g * e * dt;
                }
            }
        }
    }
}

fn terminal_values(ens: &ParticleEnsemble, spec: &DriverSpec) -> Vec<f64> {
    let (n, np, m) = (ens.dims.state, ens.particles, ens.grid.steps());
    let mx = ens.mean_x_at(m);
    let mut y = vec![0.0; np * n];
    par::for_each_chunk(&mut y, n, || (), |_, i, out| (spec.terminal)(ens.state(m, i), mx, out));
    if let Some(cross) = &spec.terminal_cross {
        let mut c = vec![0.0; np * n];
        par::for_each_chunk(&mut c, n, || (), |_, i, out| cross(ens.state(m, i), mx, out));
        let cm = column_means(&c, n);
        for row in y.chunks_mut(n) {
            for (v, a) in row.iter_mut().zip(&cm) {
                *v += a;
            }
        }
    }
    y
}

/// Driver (plus averaged cross term) for every particle at step `k`.
#[allow(clippy::too_many_arguments)]
fn driver_values(
    ens: &ParticleEnsemble,
    spec: &DriverSpec,
    k: usize,
    y: &[f64],
    mean_y: &[f64],
    z: &[f64],
    mean_z: &[f64],
) -> Vec<f64> {
    let (n, r, np) = (ens.dims.state, ens.dims.noise, ens.particles);
    let t = ens.grid.t(k);
    let (mx, ma) = (ens.mean_x_at(k), ens.mean_a_at(k));
    let eval = |f: &DriverFn| {
        let mut out = vec![0.0; np * n];
        par::for_each_chunk(&mut out, n, || (), |_, i, o| {
            let args = DriverArgs {
                t,
                x: ens.state(k, i),
                mean_x: mx,
                mean_a: ma,
                u: ens.control(k, i),
                y: &y[i * n..(i + 1) * n],
                mean_y,
                z: &z[i * n * r..(i + 1) * n * r],
                mean_z,
            };
            f(&args, o)
        });
        out
    };
    let mut f = eval(&spec.driver);
    if let Some(cross) = &spec.driver_cross {
        let cm = column_means(&eval(cross), n);
        for row in f.chunks_mut(n) {
            for (v, a) in row.iter_mut().zip(&cm) {
                *v += a;
            }
        }
    }
    f
}

fn first_non_finite(v: &[f64], width: usize) -> Option<usize> {
    v.iter().position(|x| !x.is_finite()).map(|p| p / width)
}

/// Solves the adjoint equation backward on the ensemble. The driver is
/// evaluated explicitly at `E_k[Y_{k+1}]` and `Z_k`.
pub fn solve_backward(
    ens: &ParticleEnsemble,
    dynamics: &dyn MeanFieldDynamics,
    spec: &DriverSpec,
    mult: &MultiplierSet,
    constraints: &ConstraintSpec,
    basis: RegressionBasis,
) -> Result<AdjointSolution> {
    validate(ens, dynamics, mult, constraints, basis)?;
    let (n, r, np, m) = (ens.dims.state, ens.dims.noise, ens.particles, ens.grid.steps());
    let dt = ens.grid.dt();
    let mut y = vec![0.0; (m + 1) * np * n];
    let mut z = vec![0.0; m * np * n * r];
    let mut regression_residuals = vec![0.0; m];
    let mut r_squared = vec![1.0; m];
    let mut degree_used = vec![0; m];

    let mut last = terminal_values(ens, spec);
    let mut jump = vec![0.0; n];
    for (i, row) in last.chunks_mut(n).enumerate() {
        constraint_term(ens, mult, constraints, m, i, &mut jump);
        for (v, j) in row.iter_mut().zip(&jump) {
            *v -= j;
        }
    }
    if let Some(p) = first_non_finite(&last, n) {
        return Err(Error::NonFinite { step: m, particle: p });
    }
    y[m * np * n..].copy_from_slice(&last);

    for k in (0..m).rev() {
        let (cond, proj) = conditional_step(ens, dynamics, k, &last, basis.degree)?;
        regression_residuals[k] = proj.rms;
        r_squared[k] = proj.r_squared;
        degree_used[k] = proj.degree;
        let width = n + n * r;
        let ey: Vec<f64> = cond.chunks(width).flat_map(|c| c[..n].iter().copied()).collect();
        let zk: Vec<f64> = cond.chunks(width).flat_map(|c| c[n..].iter().copied()).collect();
        let mean_y = column_means(&ey, n);
        let mean_z = column_means(&zk, n * r);
        let f = driver_values(ens, spec, k, &ey, &mean_y, &zk, &mean_z);
        let mut yk = vec![0.0; np * n];
        par::for_each_chunk(&mut yk, n, || vec![0.0; n], |jump, i, out| {
            constraint_term(ens, mult, constraints, k, i, jump);
            for a in 0..n {
                out[a] = ey[i * n + a] + dt * f[i * n + a] - jump[a];
            }
        });
        if let Some(p) = first_non_finite(&yk, n) {
            return Err(Error::NonFinite { step: k, particle: p });
        }
        y[k * np * n..(k + 1) * np * n].copy_from_slice(&yk);
        z[k * np * n * r..(k + 1) * np * n * r].copy_from_slice(&zk);
        last = yk;
    }
    Ok(AdjointSolution {
        state_dim: n,
        noise_dim: r,
        particles: np,
        steps: m,
        dt,
        y,
        z,
        regression_residuals,
        r_squared,
        degree_used,
        applied_atoms: BTreeMap::new(),
    })
}

/// Adds measure-atom contributions `(node, vector)` to `Y` at every node
/// `<= node` for all particles. Atoms at the same node are merged first.
pub fn apply_measure_atoms(solution: &AdjointSolution, atoms: &[(usize, Vec<f64>)]) -> Result<AdjointSolution> {
    let n = solution.state_dim;
    let mut merged: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (k, w) in atoms {
        if *k > solution.steps {
            return Err(Error::InvalidInput(format!("atom at step {k} beyond grid of {} steps", solution.steps)));
        }
        check_dim("atom weight", n, w.len())?;
        let slot = merged.entry(*k).or_insert_with(|| vec![0.0; n]);
        for (s, v) in slot.iter_mut().zip(w) {
            *s += v;
        }
    }
    let mut out = solution.clone();
    let np = solution.particles;
    for (k, w) in &merged {
        for j in 0..=*k {
            for row in out.y[j * np * n..(j + 1) * np * n].chunks_mut(n) {
                for (v, a) in row.iter_mut().zip(w) {
                    *v += a;
                }
            }
        }
        let slot = out.applied_atoms.entry(*k).or_insert_with(|| vec![0.0; n]);
        for (s, v) in slot.iter_mut().zip(w) {
            *s += v;
        }
    }
    Ok(out)
}

/// Mean over steps of the particle RMS of the one-step defect
/// `(Y_k - E_k[Y_{k+1}] - dt f(Y_k, Z_k) + constraint terms) / dt`
/// plus the distance of `Z_k` from its projection estimate.
pub fn bsde_residual(
    ens: &ParticleEnsemble,
    dynamics: &dyn MeanFieldDynamics,
    spec: &DriverSpec,
    mult: &MultiplierSet,
    constraints: &ConstraintSpec,
    solution: &AdjointSolution,
) -> Result<f64> {
    let (n, r, np, m) = (ens.dims.state, ens.dims.noise, ens.particles, ens.grid.steps());
    check_dim("solution particles", np, solution.particles)?;
    check_dim("solution steps", m, solution.steps)?;
    check_dim("solution state dimension", n, solution.state_dim)?;
    if m == 0 {
        return Ok(0.0);
    }
    let dt = ens.grid.dt();
    let mut per_step = Vec::with_capacity(m);
    for k in 0..m {
        let degree = solution.degree_used.get(k).copied().unwrap_or(1);
        let (cond, _) = conditional_step(ens, dynamics, k, solution.y_step(k + 1), degree)?;
        let yk = solution.y_step(k);
        let zk = solution.z_step(k);
        let f = driver_values(ens, spec, k, yk, &solution.mean_y(k), zk, &solution.mean_z(k));
        let width = n + n * r;
        let sq: Vec<f64> = par::map_range(np, |i| {
            let mut jump = vec![0.0; n];
            constraint_term(ens, mult, constraints, k, i, &mut jump);
            let c = &cond[i * width..(i + 1) * width];
            let dy: f64 = (0..n)
                .map(|a| ((yk[i * n + a] - c[a] - dt * f[i * n + a] + jump[a]) / dt).powi(2))
                .sum();
            let dz: f64 = (0..n * r).map(|q| (zk[i * n * r + q] - c[n + q]).powi(2)).sum();
            dy.sqrt() + dz.sqrt()
        });
        let sq: Vec<f64> = sq.iter().map(|v| v * v).collect();
        per_step.push(pairwise_mean(&sq).sqrt());
    }
    Ok(pairwise_mean(&per_step))
}

#[cfg(test)]
mod tests;

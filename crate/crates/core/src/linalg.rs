//! Small dense numerical kernels shared by the solvers.
//!
//! Everything here works on `nalgebra` dense types and is sized for desk
//! problems (a few hundred unknowns at most). Reductions over particles go
//! through [`pairwise_sum`] so results never depend on thread scheduling.

use nalgebra::{DMatrix, DVector};

/// Pairwise (cascade) summation with a fixed split pattern.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean with pairwise summation; zero for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Per-column pairwise means of a row-major `rows x width` buffer.
pub fn column_means(data: &[f64], width: usize) -> Vec<f64> {
    if width == 0 {
        return Vec::new();
    }
    if width == 1 {
        return vec![pairwise_mean(data)];
    }
    let mut col = Vec::with_capacity(data.len() / width);
    (0..width)
        .map(|d| {
            col.clear();
            col.extend(data.iter().skip(d).step_by(width));
            pairwise_mean(&col)
        })
        .collect()
}

/// Numerical rank from singular values, threshold `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Orthonormal basis of the null space of `m` (columns of the result).
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to at least n rows so the full right singular basis is available.
    let mut padded = DMatrix::zeros(m.nrows().max(n), n);
    padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| smax == 0.0 || svd.singular_values[i] <= rel_tol * smax)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the column space of `m`.
pub fn range_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let nr = m.nrows();
    if m.ncols() == 0 {
        return DMatrix::zeros(nr, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cols: Vec<DVector<f64>> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > rel_tol * smax)
        .map(|i| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(nr, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Minimum-norm least-squares solution via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (smax * 1e-13).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Lawson-Hanson non-negative least squares: `min ||A x - b||, x >= 0`.
///
/// Columns listed in `free` are unconstrained in sign. Returns the solution
/// and the final residual norm.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, free: &[bool]) -> (DVector<f64>, f64) {
    let n = a.ncols();
    assert_eq!(free.len(), n);
    let mut x = DVector::zeros(n);
    if n == 0 {
        return (x, b.norm());
    }
    let scale = a.amax().max(b.amax()).max(1.0);
    let tol = 1e-13 * scale * (a.nrows().max(n) as f64);
    // Free columns start in the passive set.
    let mut passive: Vec<bool> = free.to_vec();
    if passive.iter().any(|&p| p) {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let z = solve_on(a, b, &idx);
        for (k, &j) in idx.iter().enumerate() {
            x[j] = z[k];
        }
    }
    let max_outer = 3 * n + 50;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best = None;
        let mut best_w = tol;
        for j in 0..n {
            if !passive[j] && w[j] > best_w {
                best_w = w[j];
                best = Some(j);
            }
        }
        let Some(j_in) = best else { break };
        passive[j_in] = true;
        let mut inner = 0;
        loop {
            inner += 1;
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z = solve_on(a, b, &idx);
            let mut zfull = DVector::zeros(n);
            for (k, &j) in idx.iter().enumerate() {
                zfull[j] = z[k];
            }
            let bad = idx.iter().any(|&j| !free[j] && zfull[j] <= 0.0);
            if !bad || inner > 3 * n + 10 {
                x = zfull;
                break;
            }
            let mut alpha = 1.0f64;
            for &j in &idx {
                if !free[j] && zfull[j] <= 0.0 {
                    let denom = x[j] - zfull[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            x += (zfull - &x) * alpha;
            for j in 0..n {
                if passive[j] && !free[j] && x[j] <= tol * 1e-3 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    for j in 0..n {
        if !free[j] && x[j] < 0.0 {
            x[j] = 0.0;
        }
    }
    let r = (b - a * &x).norm();
    (x, r)
}

fn solve_on(a: &DMatrix<f64>, b: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    if idx.is_empty() {
        return DVector::zeros(0);
    }
    let sub = a.select_columns(idx);
    lstsq(&sub, b)
}

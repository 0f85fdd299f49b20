//! Dense two-phase simplex for small linear programs.
//!
//! Solves `max c^T x` subject to `A x <= b`, `x >= 0` with Bland's rule.
//! Only used for constraint-qualification witnesses, where problems have a
//! few dozen rows at most.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

const EPS: f64 = 1e-11;

pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    let m = a.nrows();
    let n = a.ncols();
    // Tableau columns: n originals, m slacks, m artificials, rhs.
    let width = n + 2 * m + 1;
    let mut t = DMatrix::<f64>::zeros(m, width);
    let mut basis = vec![0usize; m];
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, n + i)] = sign;
        t[(i, n + m + i)] = 1.0;
        t[(i, width - 1)] = sign * b[i];
        basis[i] = n + m + i;
    }

    // Phase one: minimize the sum of artificials.
    let mut cost1 = DVector::<f64>::zeros(width - 1);
    for i in 0..m {
        cost1[n + m + i] = -1.0;
    }
    if !run(&mut t, &mut basis, &cost1, width - 1) {
        return LpOutcome::Unbounded;
    }
    let infeas: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &bj)| bj >= n + m)
        .map(|(i, _)| t[(i, width - 1)])
        .sum();
    if infeas > 1e-9 * (1.0 + b.amax()) {
        return LpOutcome::Infeasible;
    }
    // Drive remaining artificials out of the basis where possible.
    for i in 0..m {
        if basis[i] >= n + m {
            if let Some(j) = (0..n + m).find(|&j| t[(i, j)].abs() > EPS) {
                pivot(&mut t, &mut basis, i, j);
            }
        }
    }

    // Phase two on originals and slacks only.
    let mut cost2 = DVector::<f64>::zeros(width - 1);
    for j in 0..n {
        cost2[j] = c[j];
    }
    if !run(&mut t, &mut basis, &cost2, n + m) {
        return LpOutcome::Unbounded;
    }
    let mut x = DVector::zeros(n);
    for (i, &bj) in basis.iter().enumerate() {
        if bj < n {
            x[bj] = t[(i, width - 1)];
        }
    }
    let value = c.dot(&x);
    LpOutcome::Optimal { x, value }
}

/// Maximizes `cost . x` over the current tableau using only the first
/// `allowed` columns as entering candidates. Returns false when unbounded.
fn run(t: &mut DMatrix<f64>, basis: &mut [usize], cost: &DVector<f64>, allowed: usize) -> bool {
    let m = t.nrows();
    let rhs = t.ncols() - 1;
    for _ in 0..10_000 {
        // Reduced costs r_j = c_j - c_B^T column_j.
        let mut entering = None;
        for j in 0..allowed {
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                r -= cost[basis[i]] * t[(i, j)];
            }
            if r > EPS {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else { return true };
        let mut leave = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            let aij = t[(i, j)];
            if aij > EPS {
                let ratio = t[(i, rhs)] / aij;
                if ratio < best - 1e-14 || (ratio <= best + 1e-14 && leave.is_none_or(|l: usize| basis[i] < basis[l])) {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(i) = leave else { return false };
        pivot(t, basis, i, j);
    }
    true
}

fn pivot(t: &mut DMatrix<f64>, basis: &mut [usize], row: usize, col: usize) {
    let p = t[(row, col)];
    let width = t.ncols();
    for j in 0..width {
        t[(row, j)] /= p;
    }
    for i in 0..t.nrows() {
        if i != row {
            let f = t[(i, col)];
            if f != 0.0 {
                for j in 0..width {
                    let v = t[(row, j)];
                    t[(i, j)] -= f * v;
                }
            }
        }
    }
    basis[row] = col;
}

//! Closed convex cones in finite dimension and box-shaped feasible sets.
//!
//! Cones are stored by generators: a polyhedral cone is `{G w : w >= 0}` for a
//! generator matrix `G` whose columns are the extreme directions. The dual
//! cone `K+ = {xi : <y, xi> >= 0 for all y in K}` is computed on demand by
//! enumerating extreme rays, which is exact at the dimensions used here.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{nnls, null_space, range_space};

/// Default absolute membership tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// A closed convex cone in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConeSpec {
    /// The nonnegative orthant `R^n_+`.
    Orthant(usize),
    /// The trivial cone `{0}`.
    Zero(usize),
    /// The whole space `R^n`.
    Free(usize),
    /// Cartesian product of cones, coordinates concatenated in order.
    Product(Vec<ConeSpec>),
    /// `{G w : w >= 0}`, one generator per column.
    Polyhedral(DMatrix<f64>),
}

impl ConeSpec {
    pub fn orthant(n: usize) -> Result<Self> {
        Self::positive_dim(n)?;
        Ok(ConeSpec::Orthant(n))
    }

    pub fn zero(n: usize) -> Result<Self> {
        Self::positive_dim(n)?;
        Ok(ConeSpec::Zero(n))
    }

    pub fn free(n: usize) -> Result<Self> {
        Self::positive_dim(n)?;
        Ok(ConeSpec::Free(n))
    }

    pub fn product(factors: Vec<ConeSpec>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidInput("product cone needs at least one factor".into()));
        }
        Ok(ConeSpec::Product(factors))
    }

    /// Polyhedral cone from a generator matrix (columns are generators).
    pub fn polyhedral(generators: DMatrix<f64>) -> Result<Self> {
        Self::positive_dim(generators.nrows())?;
        if generators.ncols() == 0 {
            return Err(Error::InvalidInput("polyhedral cone needs a generator".into()));
        }
        for (j, col) in generators.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!("generator column {j} is zero")));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("generator column {j} is not finite")));
            }
        }
        Ok(ConeSpec::Polyhedral(generators))
    }

    fn positive_dim(n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidInput("cone dimension must be positive".into()));
        }
        Ok(())
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match self {
            ConeSpec::Orthant(n) | ConeSpec::Zero(n) | ConeSpec::Free(n) => *n,
            ConeSpec::Product(f) => f.iter().map(ConeSpec::dim).sum(),
            ConeSpec::Polyhedral(g) => g.nrows(),
        }
    }

    /// Generators of the cone as matrix columns.
    pub fn generator_matrix(&self) -> DMatrix<f64> {
        match self {
            ConeSpec::Orthant(n) => DMatrix::identity(*n, *n),
            ConeSpec::Zero(n) => DMatrix::zeros(*n, 0),
            ConeSpec::Free(n) => plus_minus_identity(*n),
            ConeSpec::Product(f) => block_diag(f.iter().map(ConeSpec::generator_matrix).collect()),
            ConeSpec::Polyhedral(g) => g.clone(),
        }
    }

    /// Generators of the dual cone `K+` as matrix columns.
    pub fn dual_generator_matrix(&self) -> DMatrix<f64> {
        match self {
            ConeSpec::Orthant(n) => DMatrix::identity(*n, *n),
            ConeSpec::Zero(n) => plus_minus_identity(*n),
            ConeSpec::Free(n) => DMatrix::zeros(*n, 0),
            ConeSpec::Product(f) => {
                block_diag(f.iter().map(ConeSpec::dual_generator_matrix).collect())
            }
            ConeSpec::Polyhedral(g) => polyhedral_dual_generators(g),
        }
    }

    /// True when the cone has nonempty interior.
    pub fn is_solid(&self) -> bool {
        match self {
            ConeSpec::Orthant(_) | ConeSpec::Free(_) => true,
            ConeSpec::Zero(_) => false,
            ConeSpec::Product(f) => f.iter().all(ConeSpec::is_solid),
            ConeSpec::Polyhedral(g) => crate::linalg::numerical_rank(g, 1e-12) == g.nrows(),
        }
    }

    /// Membership `y in K` up to an absolute tolerance.
    pub fn contains(&self, y: &[f64], tol: f64) -> Result<bool> {
        check_dim("cone vector", self.dim(), y.len())?;
        Ok(self.contains_unchecked(y, tol))
    }

    fn contains_unchecked(&self, y: &[f64], tol: f64) -> bool {
        match self {
            ConeSpec::Orthant(_) => y.iter().all(|&v| v >= -tol),
            ConeSpec::Zero(_) => y.iter().all(|&v| v.abs() <= tol),
            ConeSpec::Free(_) => y.iter().all(|v| v.is_finite()),
            ConeSpec::Product(f) => {
                let mut off = 0;
                f.iter().all(|c| {
                    let d = c.dim();
                    let ok = c.contains_unchecked(&y[off..off + d], tol);
                    off += d;
                    ok
                })
            }
            ConeSpec::Polyhedral(g) => {
                let b = DVector::from_column_slice(y);
                let (_, r) = nnls(g, &b, &vec![false; g.ncols()]);
                r <= tol
            }
        }
    }

    /// Distance-like measure of how far `y` is from the cone (zero inside).
    pub fn violation(&self, y: &[f64]) -> Result<f64> {
        check_dim("cone vector", self.dim(), y.len())?;
        Ok(self.violation_unchecked(y))
    }

    fn violation_unchecked(&self, y: &[f64]) -> f64 {
        match self {
            ConeSpec::Orthant(_) => y.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max),
            ConeSpec::Zero(_) => y.iter().map(|v| v.abs()).fold(0.0, f64::max),
            ConeSpec::Free(_) => 0.0,
            ConeSpec::Product(f) => {
                let mut off = 0;
                let mut worst: f64 = 0.0;
                for c in f {
                    let d = c.dim();
                    worst = worst.max(c.violation_unchecked(&y[off..off + d]));
                    off += d;
                }
                worst
            }
            ConeSpec::Polyhedral(g) => {
                let b = DVector::from_column_slice(y);
                nnls(g, &b, &vec![false; g.ncols()]).1
            }
        }
    }

    /// Dual membership: `<g, xi> >= -tol` for every generator `g` of the cone.
    pub fn dual_contains(&self, xi: &[f64], tol: f64) -> Result<bool> {
        check_dim("dual vector", self.dim(), xi.len())?;
        let g = self.generator_matrix();
        let x = DVector::from_column_slice(xi);
        Ok(g.column_iter().all(|col| col.dot(&x) >= -tol))
    }

    /// Interior membership: `<y, xi> > 0` for every nonzero dual generator.
    ///
    /// Cones with empty interior always return false.
    pub fn interior_contains(&self, y: &[f64]) -> Result<bool> {
        check_dim("cone vector", self.dim(), y.len())?;
        if !self.is_solid() {
            return Ok(false);
        }
        let d = self.dual_generator_matrix();
        let v = DVector::from_column_slice(y);
        Ok(d.column_iter().all(|col| col.dot(&v) > 0.0))
    }

    /// Distance from `y` to the boundary of the cone, assuming `y in K`.
    ///
    /// Uses the unit-normalized dual generators: the slack of the tightest
    /// facet inequality. For cones with empty interior this is zero.
    pub fn boundary_distance(&self, y: &[f64]) -> Result<f64> {
        check_dim("cone vector", self.dim(), y.len())?;
        if !self.is_solid() {
            return Ok(0.0);
        }
        let d = self.dual_generator_matrix();
        let v = DVector::from_column_slice(y);
        Ok(d
            .column_iter()
            .map(|col| col.dot(&v) / col.norm())
            .fold(f64::INFINITY, f64::min)
            .max(0.0))
    }
}

fn plus_minus_identity(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        m[(i, 2 * i)] = 1.0;
        m[(i, 2 * i + 1)] = -1.0;
    }
    m
}

fn block_diag(blocks: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        m.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(&b);
        r += b.nrows();
        c += b.ncols();
    }
    m
}

/// Extreme rays of `{xi : G^T xi >= 0}` plus a +/- basis of its lineality space.
fn polyhedral_dual_generators(g: &DMatrix<f64>) -> DMatrix<f64> {
    const TOL: f64 = 1e-12;
    let n = g.nrows();
    let gt = g.transpose();
    let lineality = null_space(&gt, TOL);
    let q = range_space(g, TOL);
    let r = q.ncols();
    let a = &gt * &q; // k x r, full column rank
    let k = a.nrows();
    let mut rays: Vec<DVector<f64>> = Vec::new();
    let push_ray = |eta: DVector<f64>, rays: &mut Vec<DVector<f64>>| {
        let xi = &q * eta;
        let norm = xi.norm();
        if norm < 1e-14 {
            return;
        }
        let xi = xi / norm;
        if rays.iter().all(|other| (other - &xi).norm() > 1e-9) {
            rays.push(xi);
        }
    };
    if r > 0 {
        let scale = a.amax().max(1.0);
        for subset in combinations(k, r - 1) {
            let sub = if subset.is_empty() {
                DMatrix::zeros(0, r)
            } else {
                a.select_rows(&subset)
            };
            let ns = null_space(&sub, 1e-10);
            if ns.ncols() != 1 {
                continue;
            }
            let v = ns.column(0).into_owned();
            for sign in [1.0, -1.0] {
                let cand = &v * sign;
                let vals = &a * &cand;
                if vals.iter().all(|&x| x >= -1e-10 * scale) {
                    push_ray(cand, &mut rays);
                }
            }
        }
    }
    let mut cols = rays;
    for j in 0..lineality.ncols() {
        let l = lineality.column(j).into_owned();
        cols.push(l.clone());
        cols.push(-l);
    }
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 && idx[0] == n - k {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Box `{x : lower <= x <= upper}`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Sign restriction of one normal-cone coordinate at a point of a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalSign {
    /// Interior coordinate: the component must vanish.
    Zero,
    /// At the lower bound only.
    NonPositive,
    /// At the upper bound only.
    NonNegative,
    /// Lower and upper bound coincide.
    Free,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box upper bound", lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::InvalidInput(format!("box coordinate {i}: [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The whole space `R^n`.
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }

    /// Euclidean projection onto the box.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| v.clamp(l, u))
            .collect()
    }

    /// Per-coordinate description of the normal cone `N_C(x)`.
    pub fn normal_signs(&self, x: &[f64], tol: f64) -> Vec<NormalSign> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| {
                let at_lo = (v - l).abs() <= tol;
                let at_hi = (u - v).abs() <= tol;
                match (at_lo, at_hi) {
                    (true, true) => NormalSign::Free,
                    (true, false) => NormalSign::NonPositive,
                    (false, true) => NormalSign::NonNegative,
                    (false, false) => NormalSign::Zero,
                }
            })
            .collect()
    }

    /// `max(0, sup_{c in box} <c - x, xi>)`; zero exactly when `xi` lies in
    /// the normal cone at `x`. Infinite when `xi` points along an unbounded
    /// direction.
    pub fn normal_cone_residual(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        check_dim("box point", self.dim(), x.len())?;
        check_dim("normal vector", self.dim(), xi.len())?;
        if !self.contains(x, DEFAULT_TOL) {
            return Err(Error::Infeasible(format!("point {x:?} lies outside the box")));
        }
        let mut sup = 0.0;
        for i in 0..x.len() {
            let s = xi[i];
            let term = if s > 0.0 {
                (self.upper[i] - x[i]) * s
            } else if s < 0.0 {
                (self.lower[i] - x[i]) * s
            } else {
                0.0
            };
            sup += term;
        }
        Ok(sup.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_gen() -> ConeSpec {
        // Generators (1,1) and (0,1) as columns.
        ConeSpec::polyhedral(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])).unwrap()
    }

    #[test]
    fn orthant_membership() {
        let k = ConeSpec::orthant(2).unwrap();
        assert!(k.contains(&[1.0, 2.0], 0.0).unwrap());
        assert!(!k.contains(&[1.0, -0.5], DEFAULT_TOL).unwrap());
        assert!(matches!(k.contains(&[1.0], 0.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn polyhedral_membership_by_feasibility() {
        // Generators (1,1),(0,1): G w = (2,1) forces w = (2,-1), so outside.
        let k = two_gen();
        let y_out = [2.0, 1.0];
        assert!(!k.contains(&y_out, DEFAULT_TOL).unwrap());
        // Generators (1,0),(1,1): (2,1) = 1*(1,0) + 1*(1,1).
        let k2 = ConeSpec::polyhedral(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert!(k2.contains(&y_out, DEFAULT_TOL).unwrap());
    }

    #[test]
    fn dual_membership_examples() {
        let k = ConeSpec::orthant(2).unwrap();
        assert!(k.dual_contains(&[1.0, 2.0], DEFAULT_TOL).unwrap());
        let z = ConeSpec::zero(3).unwrap();
        assert!(z.dual_contains(&[-5.0, 3.0, 1e6], DEFAULT_TOL).unwrap());
        // Generators (1,0),(1,1): <(1,0),(1,-1)> = 1, <(1,1),(1,-1)> = 0 -> in dual.
        let k2 = ConeSpec::polyhedral(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert!(k2.dual_contains(&[1.0, -1.0], DEFAULT_TOL).unwrap());
        // Generators (1,1),(0,1): <(0,1),(1,-1)> = -1 -> not in dual.
        assert!(!two_gen().dual_contains(&[1.0, -1.0], DEFAULT_TOL).unwrap());
    }

    #[test]
    fn interior_examples() {
        let k = ConeSpec::orthant(2).unwrap();
        assert!(k.interior_contains(&[1.0, 1.0]).unwrap());
        assert!(!k.interior_contains(&[0.0, 1.0]).unwrap());
        assert!(!ConeSpec::zero(2).unwrap().interior_contains(&[0.0, 0.0]).unwrap());
        assert!(ConeSpec::free(2).unwrap().interior_contains(&[0.0, 0.0]).unwrap());
    }

    #[test]
    fn simplicial_dual_generators_are_inverse_transpose() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let d = ConeSpec::polyhedral(g.clone()).unwrap().dual_generator_matrix();
        assert_eq!(d.ncols(), 2);
        // every dual generator is tight on exactly one primal generator
        let prod = g.transpose() * &d;
        for j in 0..2 {
            let col = prod.column(j);
            assert!(col.iter().all(|&v| v >= -1e-12));
            assert_eq!(col.iter().filter(|v| v.abs() < 1e-12).count(), 1);
        }
    }

    #[test]
    fn non_simplicial_dual_in_three_dims() {
        // Square-based pyramid around the z axis: 4 generators in R^3.
        let g = DMatrix::from_column_slice(
            3,
            4,
            &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, -1.0, 0.0, 1.0, 0.0, -1.0, 1.0],
        );
        let k = ConeSpec::polyhedral(g).unwrap();
        let d = k.dual_generator_matrix();
        assert_eq!(d.ncols(), 4);
        assert!(k.interior_contains(&[0.0, 0.0, 1.0]).unwrap());
        assert!(!k.interior_contains(&[1.0, 0.0, 1.0]).unwrap());
        assert!(k.contains(&[0.5, 0.5, 1.0], 1e-10).unwrap());
        assert!(!k.contains(&[1.0, 1.0, 1.0], 1e-10).unwrap());
    }

    #[test]
    fn lower_dimensional_polyhedral_dual_has_lineality() {
        let g = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let k = ConeSpec::polyhedral(g).unwrap();
        assert!(!k.is_solid());
        assert!(k.dual_contains(&[0.0, -3.0], 0.0).unwrap());
        assert!(!k.interior_contains(&[1.0, 0.0]).unwrap());
        let d = k.dual_generator_matrix();
        assert_eq!(d.ncols(), 3);
    }

    #[test]
    fn normal_cone_examples() {
        let b = BoxSet::cube(2, 0.0, 1.0).unwrap();
        assert_eq!(b.normal_cone_residual(&[0.5, 0.5], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(b.normal_cone_residual(&[0.0, 0.5], &[-1.0, 0.0]).unwrap(), 0.0);
        // vertices (1, *) maximize <c - x, (1,0)> = 1
        assert_eq!(b.normal_cone_residual(&[0.0, 0.5], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            b.normal_cone_residual(&[2.0, 0.5], &[0.0, 0.0]),
            Err(Error::Infeasible(_))
        ));
        let r = BoxSet::unbounded(1);
        assert_eq!(r.normal_cone_residual(&[3.0], &[1.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn invalid_constructions() {
        assert!(ConeSpec::orthant(0).is_err());
        assert!(ConeSpec::polyhedral(DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn orthant_is_self_dual(xi in prop::collection::vec(-5.0f64..5.0, 4)) {
            let k = ConeSpec::orthant(4).unwrap();
            prop_assert_eq!(k.dual_contains(&xi, 0.0).unwrap(), k.contains(&xi, 0.0).unwrap());
        }

        #[test]
        fn orthant_interior_is_positive_coordinates(y in prop::collection::vec(-3.0f64..3.0, 3)) {
            let k = ConeSpec::orthant(3).unwrap();
            let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(k.interior_contains(&y).unwrap(), min > 0.0);
        }

        #[test]
        fn primal_membership_equals_bidual_test(a in -8i32..8, b in -8i32..8) {
            // Rational test vector, generators (1,0),(1,2) with dual generators (2,-1),(0,1).
            let y = [a as f64 / 4.0, b as f64 / 4.0];
            let k = ConeSpec::polyhedral(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0])).unwrap();
            let by_dual = 2.0 * y[0] - y[1] >= 0.0 && y[1] >= 0.0;
            prop_assert_eq!(k.contains(&y, 1e-12).unwrap(), by_dual);
            let d = k.dual_generator_matrix();
            let via_generators = d.column_iter().all(|c| c[0] * y[0] + c[1] * y[1] >= -1e-12);
            prop_assert_eq!(via_generators, by_dual);
        }

        #[test]
        fn product_membership_is_componentwise(y in prop::collection::vec(-2.0f64..2.0, 4)) {
            let a = ConeSpec::orthant(2).unwrap();
            let b = ConeSpec::zero(1).unwrap();
            let c = ConeSpec::free(1).unwrap();
            let p = ConeSpec::product(vec![a.clone(), b.clone(), c.clone()]).unwrap();
            let expect = a.contains(&y[..2], 1e-12).unwrap()
                && b.contains(&y[2..3], 1e-12).unwrap()
                && c.contains(&y[3..], 1e-12).unwrap();
            prop_assert_eq!(p.contains(&y, 1e-12).unwrap(), expect);
        }
    }
}

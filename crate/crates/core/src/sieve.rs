//! Covariate standardization and the orthonormalized Legendre sieve.

use nalgebra::DMatrix;

use crate::error::{AdrfError, Result};
use crate::scalar::Real;

/// Held-out standardized coordinates are clipped to this magnitude.
pub const HELD_OUT_CLIP: f64 = 1.5;

/// Relative residual norm below which a raw sieve column counts as dependent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Coordinatewise affine map of the training range onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    min: Vec<T>,
    max: Vec<T>,
}

impl<T: Real> Standardizer<T> {
    pub fn fit(x: &DMatrix<T>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(AdrfError::Parameter(format!(
                "standardization needs at least 2 rows, got {}",
                x.nrows()
            )));
        }
        let mut min = Vec::with_capacity(x.ncols());
        let mut max = Vec::with_capacity(x.ncols());
        for (c, col) in x.column_iter().enumerate() {
            let lo = col.iter().copied().fold(col[0], |a, b| a.min(b));
            let hi = col.iter().copied().fold(col[0], |a, b| a.max(b));
            if !(hi > lo) {
                return Err(AdrfError::DegenerateCovariate { column: c });
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Standardizer { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn min(&self) -> &[T] {
        &self.min
    }

    pub fn max(&self) -> &[T] {
        &self.max
    }

    #[inline]
    fn map(&self, j: usize, v: T) -> T {
        let two = T::lit(2.0);
        two * (v - self.min[j]) / (self.max[j] - self.min[j]) - T::one()
    }

    /// Standardizes the training matrix itself (no clipping).
    pub fn transform(&self, x: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| self.map(j, x[(i, j)]))
    }

    /// Standardizes a new point, clipping each coordinate to `[-1.5, 1.5]`.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let clip = T::lit(HELD_OUT_CLIP);
        x.iter()
            .enumerate()
            .map(|(j, &v)| self.map(j, v).max(-clip).min(clip))
            .collect()
    }
}

/// `(X_st, standardizer)` for a covariate matrix.
pub fn standardize<T: Real>(x: &DMatrix<T>) -> Result<(DMatrix<T>, Standardizer<T>)> {
    let s = Standardizer::fit(x)?;
    Ok((s.transform(x), s))
}

/// Values `P_1(x), ..., P_degree(x)` of the standard Legendre polynomials.
pub fn legendre_values<T: Real>(x: T, degree: usize, out: &mut Vec<T>) {
    out.clear();
    if degree == 0 {
        return;
    }
    let mut prev = T::one();
    let mut cur = x;
    out.push(cur);
    for l in 1..degree {
        let lf = T::from_usize_lossy(l);
        let next = (T::from_usize_lossy(2 * l + 1) * x * cur - lf * prev) / (lf + T::one());
        prev = cur;
        cur = next;
        out.push(cur);
    }
}

/// Raw sieve row: the constant, then `P_l(x_j)` ordered by degree then coordinate.
pub fn raw_sieve_row<T: Real>(x_st: &[T], degree: usize) -> Vec<T> {
    let p = x_st.len();
    let mut row = vec![T::zero(); 1 + p * degree];
    row[0] = T::one();
    let mut buf = Vec::with_capacity(degree);
    for (j, &x) in x_st.iter().enumerate() {
        legendre_values(x, degree, &mut buf);
        for (l, &v) in buf.iter().enumerate() {
            row[1 + p * l + j] = v;
        }
    }
    row
}

/// Checks that `k - 1` is a multiple of `p`; returns the degree `(k-1)/p`.
///
/// `k = 1` (the constant function alone) is accepted as a degenerate sieve.
pub fn sieve_degree(k: usize, p: usize) -> Result<usize> {
    if p == 0 {
        return Err(AdrfError::Parameter("sieve needs at least one covariate".into()));
    }
    if k == 1 {
        return Ok(0);
    }
    if k < 1 + p || (k - 1) % p != 0 {
        return Err(AdrfError::Parameter(format!(
            "sieve size k = {k} invalid for p = {p}: (k - 1)/p must be a positive integer"
        )));
    }
    Ok((k - 1) / p)
}

/// Sieve design orthonormal under the empirical `(1/n)` inner product.
///
/// `basis` is stored observation-major (k x n): column `i` is `nu_k(X_i)`.
#[derive(Debug, Clone)]
pub struct SieveDesign<T> {
    k: usize,
    p: usize,
    degree: usize,
    basis: DMatrix<T>,
    /// Upper triangular k x k map from raw rows to orthonormal rows.
    transform: DMatrix<T>,
}

impl<T: Real> SieveDesign<T> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn transform(&self) -> &DMatrix<T> {
        &self.transform
    }

    /// `nu_k(X_i)` of training row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.basis.as_slice()[i * self.k..(i + 1) * self.k]
    }

    /// All rows, flattened observation-major.
    pub fn flat(&self) -> &[T] {
        self.basis.as_slice()
    }

    /// n x k design matrix.
    pub fn matrix(&self) -> DMatrix<T> {
        self.basis.transpose()
    }

    /// Orthonormal basis at an already-standardized point.
    pub fn evaluate(&self, x_st: &[T]) -> Vec<T> {
        let raw = raw_sieve_row(x_st, self.degree);
        apply_transform(&raw, &self.transform)
    }

    /// Returns a copy whose design is right-multiplied by `a` (k x k).
    pub fn reparametrized(&self, a: &DMatrix<T>) -> Self {
        let transform = &self.transform * a;
        let basis = a.transpose() * &self.basis;
        SieveDesign {
            k: self.k,
            p: self.p,
            degree: self.degree,
            basis,
            transform,
        }
    }
}

fn apply_transform<T: Real>(raw: &[T], transform: &DMatrix<T>) -> Vec<T> {
    let k = raw.len();
    (0..k)
        .map(|c| (0..=c).fold(T::zero(), |acc, r| acc + raw[r] * transform[(r, c)]))
        .collect()
}

/// Builds the orthonormalized Legendre sieve of size `k` on standardized covariates.
///
/// Orthonormalization is a twice-iterated Gram-Schmidt pass under the
/// `(1/n)` inner product; a raw column whose residual collapses is reported
/// as collinear.
pub fn sieve_design<T: Real>(x_st: &DMatrix<T>, k: usize) -> Result<SieveDesign<T>> {
    let (n, p) = (x_st.nrows(), x_st.ncols());
    let degree = sieve_degree(k, p)?;
    if 2 * k > n {
        return Err(AdrfError::Parameter(format!(
            "sieve size k = {k} exceeds n/2 = {}",
            n / 2
        )));
    }
    // Raw design, column-major n x k.
    let mut raw = DMatrix::zeros(n, k);
    let mut row = vec![T::zero(); p];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x_st[(i, j)];
        }
        for (c, v) in raw_sieve_row(&row, degree).into_iter().enumerate() {
            raw[(i, c)] = v;
        }
    }

    let n_t = T::from_usize_lossy(n);
    let ip = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y) / n_t;

    let mut q_cols: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut transform = DMatrix::zeros(k, k);
    for c in 0..k {
        let original: Vec<T> = raw.column(c).iter().copied().collect();
        let original_norm = ip(&original, &original).sqrt();
        let mut v = original.clone();
        let mut t = vec![T::zero(); k];
        t[c] = T::one();
        for _pass in 0..2 {
            for (j, qj) in q_cols.iter().enumerate() {
                let coef = ip(&v, qj);
                for (a, &b) in v.iter_mut().zip(qj) {
                    *a -= coef * b;
                }
                for r in 0..=j {
                    t[r] -= coef * transform[(r, j)];
                }
            }
        }
        let norm = ip(&v, &v).sqrt();
        if !(norm > T::lit(RANK_TOLERANCE) * original_norm) {
            return Err(AdrfError::Collinearity { column: c });
        }
        for a in &mut v {
            *a /= norm;
        }
        for r in 0..=c {
            transform[(r, c)] = t[r] / norm;
        }
        q_cols.push(v);
    }

    // Store raw * transform so that held-out evaluation reproduces training rows.
    let mut basis = DMatrix::zeros(k, n);
    let mut raw_row = vec![T::zero(); k];
    for i in 0..n {
        for (c, v) in raw_row.iter_mut().enumerate() {
            *v = raw[(i, c)];
        }
        for (c, v) in apply_transform(&raw_row, &transform).into_iter().enumerate() {
            basis[(c, i)] = v;
        }
    }
    Ok(SieveDesign {
        k,
        p,
        degree,
        basis,
        transform,
    })
}

/// Standardizer and sieve fitted together on one covariate matrix.
#[derive(Debug, Clone)]
pub struct CovariateBasis<T> {
    pub standardizer: Standardizer<T>,
    pub design: SieveDesign<T>,
}

impl<T: Real> CovariateBasis<T> {
    pub fn fit(x: &DMatrix<T>, k: usize) -> Result<Self> {
        let (x_st, standardizer) = standardize(x)?;
        let design = sieve_design(&x_st, k)?;
        Ok(CovariateBasis { standardizer, design })
    }

    /// `nu_k` at a raw (unstandardized) covariate vector.
    pub fn evaluate(&self, x: &[T]) -> Vec<T> {
        self.design.evaluate(&self.standardizer.apply(x))
    }
}

//! Discretized functional data: grids, trapezoidal quadrature, pointwise
//! means and functional principal component analysis.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{AdrfError, Result};
use crate::scalar::{dot, Real};

/// Strictly increasing evaluation points with trapezoidal quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        let m = points.len();
        if m < 3 {
            return Err(AdrfError::InvalidGrid(format!("need at least 3 points, got {m}")));
        }
        if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
            return Err(AdrfError::InvalidGrid(format!("point {bad} is not finite")));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(AdrfError::InvalidGrid(format!(
                "points not strictly increasing at index {}",
                i + 1
            )));
        }
        let half = T::lit(0.5);
        let mut weights = Vec::with_capacity(m);
        weights.push((points[1] - points[0]) * half);
        for i in 1..m - 1 {
            weights.push((points[i + 1] - points[i - 1]) * half);
        }
        weights.push((points[m - 1] - points[m - 2]) * half);
        Ok(Grid { points, weights })
    }

    /// `m` equally spaced points on `[start, end]`.
    pub fn uniform(start: T, end: T, m: usize) -> Result<Self> {
        if m < 3 {
            return Err(AdrfError::InvalidGrid(format!("need at least 3 points, got {m}")));
        }
        if !(end > start) {
            return Err(AdrfError::InvalidGrid("empty interval".into()));
        }
        let step = (end - start) / T::from_usize_lossy(m - 1);
        let mut points: Vec<T> = (0..m).map(|i| start + step * T::from_usize_lossy(i)).collect();
        points[m - 1] = end;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Length of the underlying interval.
    pub fn span(&self) -> T {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Quadrature of the pointwise product of two value slices.
    pub fn integrate_product(&self, f: &[T], g: &[T]) -> T {
        debug_assert_eq!(f.len(), self.len());
        debug_assert_eq!(g.len(), self.len());
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .fold(T::zero(), |acc, (&w, (&a, &b))| acc + w * a * b)
    }

    /// Squared quadrature distance between two value slices.
    pub fn squared_distance(&self, f: &[T], g: &[T]) -> T {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .fold(T::zero(), |acc, (&w, (&a, &b))| {
                let d = a - b;
                acc + w * d * d
            })
    }
}

pub(crate) fn same_grid<T: Real>(a: &Arc<Grid<T>>, b: &Arc<Grid<T>>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// A curve evaluated on a shared grid.
#[derive(Debug, Clone)]
pub struct FunctionalSample<T> {
    grid: Arc<Grid<T>>,
    values: Vec<T>,
}

impl<T: Real> FunctionalSample<T> {
    pub fn new(grid: Arc<Grid<T>>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(AdrfError::Alignment {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(AdrfError::Data(format!("curve value at grid index {bad} is not finite")));
        }
        Ok(FunctionalSample { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid<T>>, f: impl Fn(T) -> T) -> Result<Self> {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: Arc<Grid<T>>) -> Self {
        let values = vec![T::zero(); grid.len()];
        FunctionalSample { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn check_grid(&self, other: &FunctionalSample<T>) -> Result<()> {
        if same_grid(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(AdrfError::GridMismatch)
        }
    }

    /// Pointwise `self + scale * other`.
    pub fn axpy(&self, scale: T, other: &FunctionalSample<T>) -> Result<Self> {
        self.check_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Ok(FunctionalSample {
            grid: Arc::clone(&self.grid),
            values,
        })
    }

    pub fn scaled(&self, scale: T) -> Self {
        FunctionalSample {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| v * scale).collect(),
        }
    }

    pub fn norm(&self) -> T {
        self.grid.integrate_product(&self.values, &self.values).sqrt()
    }
}

/// Trapezoidal quadrature of `f(t) g(t)` over the shared grid.
pub fn inner_product<T: Real>(f: &FunctionalSample<T>, g: &FunctionalSample<T>) -> Result<T> {
    f.check_grid(g)?;
    Ok(f.grid.integrate_product(&f.values, &g.values))
}

/// Pointwise arithmetic mean of a nonempty set of curves.
pub fn mean_function<T: Real>(samples: &[FunctionalSample<T>]) -> Result<FunctionalSample<T>> {
    let first = samples.first().ok_or(AdrfError::EmptyInput("mean of zero curves"))?;
    let mut acc = vec![T::zero(); first.values.len()];
    for s in samples {
        first.check_grid(s)?;
        for (a, &v) in acc.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let n = T::from_usize_lossy(samples.len());
    for a in &mut acc {
        *a /= n;
    }
    Ok(FunctionalSample {
        grid: Arc::clone(&first.grid),
        values: acc,
    })
}

/// Eigenvalues below this fraction of the leading eigenvalue are set to zero.
/// In low precision the floor is raised to `100 * epsilon`, and eigenvalues
/// at rounding level relative to the raw second moment are zero as well.
pub const EIGEN_RELATIVE_FLOOR: f64 = 1e-10;

/// Empirical Karhunen-Loeve decomposition of a sample of curves.
#[derive(Debug, Clone)]
pub struct FpcaModel<T> {
    mean: FunctionalSample<T>,
    eigenvalues: Vec<T>,
    eigenfunctions: Vec<FunctionalSample<T>>,
    /// n x J, row i holds the scores of curve i.
    scores: DMatrix<T>,
    /// `<phi_j, mean>` for every retained component.
    mean_projections: Vec<T>,
    total_variance: T,
}

impl<T: Real> FpcaModel<T> {
    pub fn grid(&self) -> &Arc<Grid<T>> {
        self.mean.grid()
    }

    pub fn mean(&self) -> &FunctionalSample<T> {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[T] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &[FunctionalSample<T>] {
        &self.eigenfunctions
    }

    pub fn scores(&self) -> &DMatrix<T> {
        &self.scores
    }

    pub fn n_samples(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of leading components with a strictly positive eigenvalue.
    pub fn positive_rank(&self) -> usize {
        self.eigenvalues.iter().take_while(|&&l| l > T::zero()).count()
    }

    pub fn mean_projections(&self) -> &[T] {
        &self.mean_projections
    }

    /// `(1/n) sum_i ||Z_i - mean||^2`.
    pub fn total_variance(&self) -> T {
        self.total_variance
    }

    /// Scores `<z - mean, phi_j>` of an arbitrary curve on the model grid.
    pub fn pc_scores(&self, z: &FunctionalSample<T>) -> Result<Vec<T>> {
        self.mean.check_grid(z)?;
        Ok(self.scores_of_values(z.values()))
    }

    pub(crate) fn scores_of_values(&self, z: &[T]) -> Vec<T> {
        let grid = self.grid();
        let centered: Vec<T> = z
            .iter()
            .zip(self.mean.values())
            .zip(grid.weights())
            .map(|((&v, &mu), &w)| (v - mu) * w)
            .collect();
        self.eigenfunctions
            .iter()
            .map(|phi| dot(&centered, phi.values()))
            .collect()
    }

    /// Curve `sum_j coeffs[j] * phi_j` on the model grid.
    pub fn expand(&self, coeffs: &[T]) -> FunctionalSample<T> {
        let mut values = vec![T::zero(); self.grid().len()];
        for (c, phi) in coeffs.iter().zip(&self.eigenfunctions) {
            for (v, &p) in values.iter_mut().zip(phi.values()) {
                *v += *c * p;
            }
        }
        FunctionalSample {
            grid: Arc::clone(self.grid()),
            values,
        }
    }
}

/// Free-function form of [`FpcaModel::pc_scores`].
pub fn pc_scores<T: Real>(model: &FpcaModel<T>, z: &FunctionalSample<T>) -> Result<Vec<T>> {
    model.pc_scores(z)
}

/// Functional principal component analysis on a shared grid.
///
/// The covariance operator is discretized as `W^{1/2} G W^{1/2}` with `W`
/// the diagonal of trapezoidal weights, so eigenvectors of that symmetric
/// matrix map back to eigenfunctions that are orthonormal under the grid
/// quadrature. Each eigenfunction is signed so that its entry of largest
/// magnitude is positive.
pub fn fpca<T: Real>(samples: &[FunctionalSample<T>], max_components: usize) -> Result<FpcaModel<T>> {
    let n = samples.len();
    if n < 2 {
        return Err(AdrfError::Parameter(format!("fpca needs at least 2 curves, got {n}")));
    }
    let grid = Arc::clone(samples[0].grid());
    let m = grid.len();
    if max_components == 0 || max_components > n.min(m) {
        return Err(AdrfError::Parameter(format!(
            "max_components must lie in 1..={}, got {max_components}",
            n.min(m)
        )));
    }
    let mean = mean_function(samples)?;

    let sqrt_w: Vec<T> = grid.weights().iter().map(|w| w.sqrt()).collect();
    // Rows: centered curves scaled by sqrt(w).
    let centered = DMatrix::from_fn(n, m, |i, t| (samples[i].values[t] - mean.values[t]) * sqrt_w[t]);
    let inv_n = T::one() / T::from_usize_lossy(n);
    let operator = (centered.transpose() * &centered) * inv_n;
    let total_variance = operator.trace();

    let eig = SymmetricEigen::new(operator);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let leading = eig.eigenvalues[order[0]].max(T::zero());
    let rounding = T::eps() * T::lit(100.0);
    let second_moment = samples
        .iter()
        .fold(T::zero(), |acc, c| acc + grid.integrate_product(&c.values, &c.values))
        * inv_n;
    let floor = (leading * T::lit(EIGEN_RELATIVE_FLOOR).max(rounding)).max(second_moment * rounding);
    let mut eigenvalues = Vec::with_capacity(max_components);
    let mut eigenfunctions = Vec::with_capacity(max_components);
    for &idx in order.iter().take(max_components) {
        let raw = eig.eigenvalues[idx];
        let lambda = if raw <= floor || raw <= T::zero() { T::zero() } else { raw };
        let u = eig.eigenvectors.column(idx);
        let mut phi: Vec<T> = u.iter().zip(&sqrt_w).map(|(&v, &s)| v / s).collect();
        let norm = grid.integrate_product(&phi, &phi).sqrt();
        let pivot = phi
            .iter()
            .copied()
            .fold(T::zero(), |best, v| if v.abs() > best.abs() { v } else { best });
        let scale = if pivot < T::zero() { -T::one() / norm } else { T::one() / norm };
        for v in &mut phi {
            *v *= scale;
        }
        eigenvalues.push(lambda);
        eigenfunctions.push(FunctionalSample {
            grid: Arc::clone(&grid),
            values: phi,
        });
    }

    let mean_projections = eigenfunctions
        .iter()
        .map(|phi| grid.integrate_product(phi.values(), mean.values()))
        .collect();
    let mut model = FpcaModel {
        mean,
        eigenvalues,
        eigenfunctions,
        scores: DMatrix::zeros(n, max_components),
        mean_projections,
        total_variance,
    };
    for (i, s) in samples.iter().enumerate() {
        let row = model.scores_of_values(s.values());
        for (j, v) in row.into_iter().enumerate() {
            model.scores[(i, j)] = v;
        }
    }
    Ok(model)
}

//! Functional stabilized weights.
//!
//! The weight at observation `i` is `rho'(eta_i^T nu_k(X_i))`, where `eta_i`
//! maximizes a kernel-localized dual objective built from the leave-one-out
//! neighbours of `Z_i` under the L2 semi-metric. The first-order condition
//! of that objective is the sample balancing equation
//!
//! ```text
//! sum_{j != i} pi_ij nu_k(X_j) K_ij / sum_{j != i} K_ij = (1/(n-1)) sum_{j != i} nu_k(X_j)
//! ```

mod dual;
mod rho;

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use dual::{kernel_weights, DualProblem, DualSolution, SolveFailure, SolverOptions};
pub use rho::RhoFamily;

use crate::dataset::Dataset;
use crate::error::{AdrfError, Result};
use crate::fda::{same_grid, FunctionalSample};
use crate::scalar::Real;
use crate::sieve::{CovariateBasis, SieveDesign};

/// Estimated weights are clipped into `[WEIGHT_FLOOR, WEIGHT_CEILING]`.
pub const WEIGHT_FLOOR: f64 = 1e-3;
pub const WEIGHT_CEILING: f64 = 1e3;
/// Largest tolerated fraction of observations whose dual solve fails.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Symmetric matrix of L2 distances `||Z_i - Z_j||` under grid quadrature.
pub fn pairwise_distances<T: Real>(samples: &[FunctionalSample<T>]) -> Result<DMatrix<T>> {
    let n = samples.len();
    let Some(first) = samples.first() else {
        return Ok(DMatrix::zeros(0, 0));
    };
    let grid = first.grid();
    if samples.iter().any(|s| !same_grid(grid, s.grid())) {
        return Err(AdrfError::GridMismatch);
    }
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..i)
                .map(|j| grid.squared_distance(samples[i].values(), samples[j].values()).sqrt())
                .collect()
        })
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Median of the strictly off-diagonal pairwise distances.
pub fn median_distance<T: Real>(distances: &DMatrix<T>) -> T {
    let n = distances.nrows();
    let mut v: Vec<T> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| distances[(i, j)])
        .collect();
    if v.is_empty() {
        return T::zero();
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) * T::lit(0.5)
    }
}

/// Coefficients `eta` with `eta^T nu(x) = v` whenever the first basis
/// column is the constant one; otherwise the least-squares fit of the
/// constant `v` on the design.
fn uniform_start<T: Real>(design: &SieveDesign<T>, v: T) -> Vec<T> {
    let k = design.k();
    let n = design.n();
    let mut eta = vec![T::zero(); k];
    if (0..n).all(|i| design.row(i)[0] == T::one()) {
        eta[0] = v;
        return eta;
    }
    let x = design.matrix();
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * nalgebra::DVector::from_element(n, v);
    match gram.cholesky() {
        Some(c) => c.solve(&rhs).iter().copied().collect(),
        None => eta,
    }
}

/// Per-observation solver report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointDiagnostics<T> {
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    pub clipped: bool,
}

/// Dual solution at one observation.
#[derive(Debug, Clone)]
pub struct LocalWeight<T> {
    pub eta: Vec<T>,
    pub grad_norm: T,
    pub iterations: usize,
}

fn local_problem_solve<T: Real>(
    design: &SieveDesign<T>,
    neighbors: &[(usize, T)],
    target: &[T],
    rho: RhoFamily,
    opts: &SolverOptions,
) -> DualSolution<T> {
    let problem = DualProblem {
        basis: design.flat(),
        k: design.k(),
        neighbors,
        target,
        rho,
    };
    let start = uniform_start(design, rho.baseline());
    problem.solve(&start, opts)
}

fn leave_one_out_target<T: Real>(design: &SieveDesign<T>, totals: &[T], i: usize) -> Vec<T> {
    let denom = T::from_usize_lossy(design.n() - 1);
    totals
        .iter()
        .zip(design.row(i))
        .map(|(&s, &v)| (s - v) / denom)
        .collect()
}

fn column_totals<T: Real>(design: &SieveDesign<T>) -> Vec<T> {
    let mut totals = vec![T::zero(); design.k()];
    for i in 0..design.n() {
        for (t, &v) in totals.iter_mut().zip(design.row(i)) {
            *t += v;
        }
    }
    totals
}

fn check_bandwidth<T: Real>(h: T) -> Result<()> {
    if h > T::zero() {
        Ok(())
    } else {
        Err(AdrfError::Parameter(format!("bandwidth must be positive, got {h}")))
    }
}

fn solve_in_sample<T: Real>(
    i: usize,
    distances: &DMatrix<T>,
    design: &SieveDesign<T>,
    totals: &[T],
    h: T,
    rho: RhoFamily,
    opts: &SolverOptions,
) -> DualSolution<T> {
    let n = design.n();
    let neighbors = kernel_weights((0..n).filter(|&j| j != i).map(|j| (j, distances[(i, j)])), h);
    let target = leave_one_out_target(design, totals, i);
    local_problem_solve(design, &neighbors, &target, rho, opts)
}

/// Maximizes the localized dual objective centred at observation `i`.
pub fn fit_local_weight<T: Real>(
    i: usize,
    distances: &DMatrix<T>,
    design: &SieveDesign<T>,
    h: T,
    rho: RhoFamily,
) -> Result<LocalWeight<T>> {
    fit_local_weight_with(i, distances, design, h, rho, &SolverOptions::default())
}

pub fn fit_local_weight_with<T: Real>(
    i: usize,
    distances: &DMatrix<T>,
    design: &SieveDesign<T>,
    h: T,
    rho: RhoFamily,
    opts: &SolverOptions,
) -> Result<LocalWeight<T>> {
    check_bandwidth(h)?;
    let n = design.n();
    if distances.nrows() != n || distances.ncols() != n {
        return Err(AdrfError::Alignment {
            expected: n,
            found: distances.nrows(),
        });
    }
    if i >= n || n < 2 {
        return Err(AdrfError::Parameter(format!("observation {i} out of range for n = {n}")));
    }
    let totals = column_totals(design);
    let sol = solve_in_sample(i, distances, design, &totals, h, rho, opts);
    if sol.converged() {
        Ok(LocalWeight {
            eta: sol.eta,
            grad_norm: sol.grad_norm,
            iterations: sol.iterations,
        })
    } else {
        Err(AdrfError::Convergence {
            index: Some(i),
            grad_norm: sol.grad_norm.to_f64_lossy(),
            iterations: sol.iterations,
        })
    }
}

fn clip_weight<T: Real>(pi: T) -> (T, bool) {
    let lo = T::lit(WEIGHT_FLOOR);
    let hi = T::lit(WEIGHT_CEILING);
    if !(pi >= lo) {
        (lo, true)
    } else if pi > hi {
        (hi, true)
    } else {
        (pi, false)
    }
}

/// Estimated stabilized weights at every sample point.
#[derive(Debug, Clone)]
pub struct WeightFit<T> {
    /// Clipped weights `pi_hat(Z_i, X_i)`.
    pub pi: Vec<T>,
    /// Unclipped `rho'(eta_i^T nu_k(X_i))`.
    pub raw_pi: Vec<T>,
    /// n x k, row i is `eta_hat_{Z_i}`.
    pub eta: DMatrix<T>,
    pub h: T,
    pub k: usize,
    pub rho: RhoFamily,
    pub diagnostics: Vec<PointDiagnostics<T>>,
    /// Indices whose dual solve did not converge.
    pub failures: Vec<usize>,
}

impl<T: Real> WeightFit<T> {
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn clipped_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.clipped).count()
    }

    /// Uniform unit weights, e.g. for degenerate comparisons.
    pub fn uniform(n: usize, k: usize) -> Self {
        WeightFit {
            pi: vec![T::one(); n],
            raw_pi: vec![T::one(); n],
            eta: DMatrix::zeros(n, k),
            h: T::max_value().unwrap_or_else(T::one),
            k,
            rho: RhoFamily::default(),
            diagnostics: vec![
                PointDiagnostics {
                    grad_norm: T::zero(),
                    iterations: 0,
                    converged: true,
                    clipped: false,
                };
                n
            ],
            failures: Vec::new(),
        }
    }
}

/// Runs the local dual at every observation of a prepared design.
pub fn estimate_weights_from_design<T: Real>(
    distances: &DMatrix<T>,
    design: &SieveDesign<T>,
    h: T,
    rho: RhoFamily,
    opts: &SolverOptions,
) -> Result<WeightFit<T>> {
    check_bandwidth(h)?;
    let n = design.n();
    if distances.nrows() != n || distances.ncols() != n {
        return Err(AdrfError::Alignment {
            expected: n,
            found: distances.nrows(),
        });
    }
    if n < 2 {
        return Err(AdrfError::Parameter("weights need at least 2 observations".into()));
    }
    let totals = column_totals(design);
    let solutions: Vec<DualSolution<T>> = (0..n)
        .into_par_iter()
        .map(|i| solve_in_sample(i, distances, design, &totals, h, rho, opts))
        .collect();
    assemble(design, solutions, h, rho)
}

fn assemble<T: Real>(
    design: &SieveDesign<T>,
    solutions: Vec<DualSolution<T>>,
    h: T,
    rho: RhoFamily,
) -> Result<WeightFit<T>> {
    let n = solutions.len();
    let k = design.k();
    let mut fit = WeightFit {
        pi: Vec::with_capacity(n),
        raw_pi: Vec::with_capacity(n),
        eta: DMatrix::zeros(n, k),
        h,
        k,
        rho,
        diagnostics: Vec::with_capacity(n),
        failures: Vec::new(),
    };
    for (i, sol) in solutions.into_iter().enumerate() {
        let v = design.row(i).iter().zip(&sol.eta).fold(T::zero(), |a, (&x, &e)| a + x * e);
        let raw = if rho.in_domain(v) { rho.d1(v) } else { T::zero() };
        let (pi, clipped) = clip_weight(raw);
        for (c, &e) in sol.eta.iter().enumerate() {
            fit.eta[(i, c)] = e;
        }
        if !sol.converged() {
            fit.failures.push(i);
        }
        fit.diagnostics.push(PointDiagnostics {
            grad_norm: sol.grad_norm,
            iterations: sol.iterations,
            converged: sol.converged(),
            clipped,
        });
        fit.raw_pi.push(raw);
        fit.pi.push(pi);
    }
    if !fit.failures.is_empty()
        && fit.failures.len() as f64 > MAX_FAILURE_FRACTION * n as f64
    {
        return Err(AdrfError::WeightFailures {
            failed: fit.failures.len(),
            total: n,
            first: fit.failures[0],
        });
    }
    Ok(fit)
}

/// Stabilized weights for every observation of a dataset.
pub fn estimate_weights<T: Real>(dataset: &Dataset<T>, h: T, k: usize, rho: RhoFamily) -> Result<WeightFit<T>> {
    let distances = pairwise_distances(dataset.curves())?;
    let basis = CovariateBasis::fit(dataset.covariates(), k)?;
    estimate_weights_from_design(&distances, &basis.design, h, rho, &SolverOptions::default())
}

/// A fitted covariate basis able to produce weights at curves outside the
/// training sample.
#[derive(Debug, Clone)]
pub struct WeightModel<T> {
    pub basis: CovariateBasis<T>,
    /// `(1/n) sum_j nu_k(X_j)` over the training rows.
    target: Vec<T>,
}

impl<T: Real> WeightModel<T> {
    pub fn new(basis: CovariateBasis<T>) -> Self {
        let totals = column_totals(&basis.design);
        let n = T::from_usize_lossy(basis.design.n());
        let target = totals.into_iter().map(|t| t / n).collect();
        WeightModel { basis, target }
    }

    pub fn fit(x: &DMatrix<T>, k: usize) -> Result<Self> {
        Ok(Self::new(CovariateBasis::fit(x, k)?))
    }

    /// Weight at a new point `(z, x)` given the distances from `z` to every
    /// training curve. Returns the clipped weight and the dual solution.
    pub fn weight_at(
        &self,
        distances_to_train: &[T],
        x: &[T],
        h: T,
        rho: RhoFamily,
        opts: &SolverOptions,
    ) -> Result<(T, DualSolution<T>)> {
        check_bandwidth(h)?;
        let design = &self.basis.design;
        if distances_to_train.len() != design.n() {
            return Err(AdrfError::Alignment {
                expected: design.n(),
                found: distances_to_train.len(),
            });
        }
        let neighbors = kernel_weights(distances_to_train.iter().copied().enumerate(), h);
        let sol = local_problem_solve(design, &neighbors, &self.target, rho, opts);
        let nu = self.basis.evaluate(x);
        let v = nu.iter().zip(&sol.eta).fold(T::zero(), |a, (&x, &e)| a + x * e);
        let raw = if rho.in_domain(v) { rho.d1(v) } else { T::zero() };
        Ok((clip_weight(raw).0, sol))
    }
}

//! Kernel-localized dual problem and its damped Newton solver.
//!
//! For normalized kernel weights `w_j` over a neighbour set, basis rows
//! `nu_j` and a target moment vector `c`, the solver maximizes
//!
//! ```text
//! H(eta) = sum_j w_j rho(eta^T nu_j) - eta^T c
//! ```
//!
//! whose stationarity condition is the weighted moment equation
//! `sum_j w_j rho'(eta^T nu_j) nu_j = c`.

use nalgebra::{DMatrix, DVector};

use super::rho::RhoFamily;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Sup-norm of the gradient at which the iteration stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial_ridge: f64,
    pub max_ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iterations: 100,
            initial_ridge: 1e-10,
            max_ridge: 1e10,
        }
    }
}

impl SolverOptions {
    /// Tolerance actually used for scalar type `T`, never below ~1000 ulps.
    pub fn effective_tolerance<T: Real>(&self) -> T {
        T::lit(self.tolerance).max(T::eps() * T::lit(1e3))
    }
}

/// Why a dual solve stopped without meeting the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFailure {
    MaxIterations,
    LineSearch,
    DampingExhausted,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct DualSolution<T> {
    pub eta: Vec<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub failure: Option<SolveFailure>,
}

impl<T: Real> DualSolution<T> {
    pub fn converged(&self) -> bool {
        self.failure.is_none()
    }
}

/// One localized dual problem. `basis` holds rows of length `k` back to back.
pub struct DualProblem<'a, T> {
    pub basis: &'a [T],
    pub k: usize,
    /// `(row index, normalized kernel weight)`; weights sum to one.
    pub neighbors: &'a [(usize, T)],
    pub target: &'a [T],
    pub rho: RhoFamily,
}

struct Evaluation<T> {
    objective: T,
    d1: Vec<T>,
    d2: Vec<T>,
}

/// Neighbour rows gathered column by column, so every per-iteration pass is
/// a contiguous loop over the neighbours.
struct Gathered<T> {
    /// `k` columns of length `m`, back to back.
    columns: Vec<T>,
    weights: Vec<T>,
    m: usize,
}

impl<T: Real> Gathered<T> {
    #[inline]
    fn column(&self, c: usize) -> &[T] {
        &self.columns[c * self.m..(c + 1) * self.m]
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let o = 4 * i;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<'a, T: Real> DualProblem<'a, T> {
    fn gather(&self) -> Gathered<T> {
        let m = self.neighbors.len();
        let mut columns = vec![T::zero(); m * self.k];
        for (r, &(j, _)) in self.neighbors.iter().enumerate() {
            let row = &self.basis[j * self.k..(j + 1) * self.k];
            for (c, &x) in row.iter().enumerate() {
                columns[c * m + r] = x;
            }
        }
        Gathered {
            columns,
            weights: self.neighbors.iter().map(|e| e.1).collect(),
            m,
        }
    }

    /// `H(eta)`, or `None` outside the domain of `rho`.
    pub fn objective(&self, eta: &[T]) -> Option<T> {
        self.evaluate(&self.gather(), eta).map(|e| e.objective)
    }

    fn evaluate(&self, g: &Gathered<T>, eta: &[T]) -> Option<Evaluation<T>> {
        let mut index = vec![T::zero(); g.m];
        for (c, &e) in eta.iter().enumerate() {
            for (v, &x) in index.iter_mut().zip(g.column(c)) {
                *v += e * x;
            }
        }
        let mut d1 = Vec::with_capacity(g.m);
        let mut d2 = Vec::with_capacity(g.m);
        let mut values = Vec::with_capacity(g.m);
        for &v in &index {
            if !self.rho.in_domain(v) {
                return None;
            }
            let (r, a, b) = self.rho.eval(v);
            values.push(r);
            d1.push(a);
            d2.push(b);
        }
        let objective = dot(&g.weights, &values) - dot(eta, self.target);
        if objective.is_finite() {
            Some(Evaluation { objective, d1, d2 })
        } else {
            None
        }
    }

    /// Gradient `sum_j w_j rho'(v_j) nu_j - c`.
    pub fn gradient(&self, eta: &[T]) -> Option<Vec<T>> {
        let g = self.gather();
        self.evaluate(&g, eta).map(|e| self.derivatives(&g, &e).0)
    }

    /// Gradient and the negated Hessian `-sum_j w_j rho''(v_j) nu_j nu_j^T`
    /// (positive semidefinite).
    fn derivatives(&self, g: &Gathered<T>, e: &Evaluation<T>) -> (Vec<T>, DMatrix<T>) {
        let k = self.k;
        let s1: Vec<T> = g.weights.iter().zip(&e.d1).map(|(&w, &a)| w * a).collect();
        let grad: Vec<T> = (0..k).map(|c| dot(&s1, g.column(c)) - self.target[c]).collect();
        let mut h = DMatrix::zeros(k, k);
        let mut scaled = vec![T::zero(); g.m];
        for c in 0..k {
            for ((s, &x), (&w, &b)) in scaled.iter_mut().zip(g.column(c)).zip(g.weights.iter().zip(&e.d2)) {
                *s = -w * b * x;
            }
            for r in c..k {
                let v = dot(&scaled, g.column(r));
                h[(r, c)] = v;
                h[(c, r)] = v;
            }
        }
        (grad, h)
    }

    /// Maximizes `H` by damped Newton with Armijo backtracking.
    pub fn solve(&self, start: &[T], opts: &SolverOptions) -> DualSolution<T> {
        let tol = opts.effective_tolerance::<T>();
        let mut eta = start.to_vec();
        let sup = |g: &[T]| g.iter().fold(T::zero(), |m, v| m.max(v.abs()));

        let gathered = self.gather();
        let mut current = match self.evaluate(&gathered, &eta) {
            Some(e) => e,
            None => {
                return DualSolution {
                    eta,
                    grad_norm: T::max_value().unwrap_or_else(T::one),
                    iterations: 0,
                    failure: Some(SolveFailure::Infeasible),
                }
            }
        };
        let (mut grad, mut neg_h) = self.derivatives(&gathered, &current);
        let mut grad_norm = sup(&grad);
        let mut iterations = 0;
        let armijo = T::lit(1e-4);
        let slack = T::eps() * T::lit(16.0);

        while grad_norm > tol {
            if iterations == opts.max_iterations {
                return DualSolution {
                    eta,
                    grad_norm,
                    iterations,
                    failure: Some(SolveFailure::MaxIterations),
                };
            }
            iterations += 1;

            let scale = (0..self.k).fold(T::one(), |m, i| m.max(neg_h[(i, i)]));
            let rhs = DVector::from_column_slice(&grad);
            let mut ridge = T::lit(opts.initial_ridge) * scale;
            let step = loop {
                let mut damped = neg_h.clone();
                for i in 0..self.k {
                    damped[(i, i)] += ridge;
                }
                if let Some(chol) = damped.cholesky() {
                    let d = chol.solve(&rhs);
                    if d.iter().all(|v| v.is_finite()) {
                        break Some(d);
                    }
                }
                ridge *= T::lit(10.0);
                if ridge > T::lit(opts.max_ridge) * scale {
                    break None;
                }
            };
            let Some(step) = step else {
                return DualSolution {
                    eta,
                    grad_norm,
                    iterations,
                    failure: Some(SolveFailure::DampingExhausted),
                };
            };

            let slope = step.iter().zip(&grad).fold(T::zero(), |a, (&d, &g)| a + d * g);
            let floor = slack * current.objective.abs().max(T::one());
            let mut t = T::one();
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<T> = eta.iter().zip(step.iter()).map(|(&e, &d)| e + t * d).collect();
                if let Some(ev) = self.evaluate(&gathered, &trial) {
                    if ev.objective >= current.objective + armijo * t * slope - floor {
                        accepted = Some((trial, ev));
                        break;
                    }
                }
                t *= T::lit(0.5);
            }
            let Some((next, ev)) = accepted else {
                return DualSolution {
                    eta,
                    grad_norm,
                    iterations,
                    failure: Some(SolveFailure::LineSearch),
                };
            };
            eta = next;
            current = ev;
            (grad, neg_h) = self.derivatives(&gathered, &current);
            grad_norm = sup(&grad);
        }
        DualSolution {
            eta,
            grad_norm,
            iterations,
            failure: None,
        }
    }
}

/// Normalized Gaussian kernel weights `K(d/h) = exp(-(d/h)^2)`.
///
/// Weights are computed relative to the nearest neighbour, which leaves the
/// normalized values unchanged and keeps the largest weight at one before
/// normalization, so the denominator never underflows. An infinite
/// bandwidth yields uniform weights.
pub fn kernel_weights<T: Real>(distances: impl Iterator<Item = (usize, T)>, h: T) -> Vec<(usize, T)> {
    let mut out: Vec<(usize, T)> = distances.map(|(j, d)| (j, d * d)).collect();
    if out.is_empty() {
        return out;
    }
    if !h.is_finite() {
        let w = T::one() / T::from_usize_lossy(out.len());
        for e in &mut out {
            e.1 = w;
        }
        return out;
    }
    let nearest = out.iter().fold(out[0].1, |m, e| m.min(e.1));
    let h2 = h * h;
    let mut total = T::zero();
    for e in &mut out {
        e.1 = (-(e.1 - nearest) / h2).exp();
        total += e.1;
    }
    out.retain(|e| e.1 > T::zero());
    for e in &mut out {
        e.1 /= total;
    }
    out
}

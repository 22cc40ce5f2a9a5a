//! Average dose-response fits under the functional linear model
//! `E{Y*(z)} = a + <b, z>`.
//!
//! Every method reduces to a truncated functional linear regression of a
//! method-specific response vector on the leading principal components:
//!
//! | method | response                                          |
//! |--------|---------------------------------------------------|
//! | naive  | `Y_i`                                             |
//! | fsw    | `Y_i * pi_i`                                      |
//! | or     | `Y_i - theta^T X_i`, alternated with least squares |
//! | dr     | augmented pseudo-outcome built from an OR fit and weights |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{AdrfError, Result};
use crate::fda::{FpcaModel, FunctionalSample};
use crate::fsw::{estimate_weights_from_design, RhoFamily, SolverOptions, WeightFit};
use crate::sieve::CovariateBasis;
use crate::scalar::{sum, Real};

/// Backfitting stops once every parameter moves by less than this.
pub const BACKFIT_TOLERANCE: f64 = 1e-8;
pub const BACKFIT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Naive,
    Fsw,
    Or,
    Dr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fsw, Method::Or, Method::Dr, Method::Naive];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Fsw => "fsw",
            Method::Or => "or",
            Method::Dr => "dr",
        }
    }

    pub fn needs_weights(self) -> bool {
        matches!(self, Method::Fsw | Method::Dr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = AdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "fsw" => Ok(Method::Fsw),
            "or" => Ok(Method::Or),
            "dr" => Ok(Method::Dr),
            other => Err(AdrfError::Parameter(format!("unknown method `{other}`"))),
        }
    }
}

/// Tuning parameters a fit was produced with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningRecord<T> {
    pub q: usize,
    pub h: Option<T>,
    pub k: Option<usize>,
    pub rho: Option<RhoFamily>,
}

impl<T: Real> TuningRecord<T> {
    fn plain(q: usize) -> Self {
        TuningRecord {
            q,
            h: None,
            k: None,
            rho: None,
        }
    }

    fn weighted(q: usize, w: &WeightFit<T>) -> Self {
        TuningRecord {
            q,
            h: Some(w.h),
            k: Some(w.k),
            rho: Some(w.rho),
        }
    }
}

/// Intercept and principal-component slope coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FlrCoefficients<T> {
    pub intercept: T,
    pub coefficients: Vec<T>,
    /// Mean of the response vector the coefficients were fitted to.
    pub response_mean: T,
}

impl<T: Real> FlrCoefficients<T> {
    /// `a + <b, Z_i>` for in-sample curve `i`, computed through its scores.
    pub fn fitted(&self, fpca: &FpcaModel<T>, i: usize) -> T {
        self.linear_part(fpca.mean_projections(), |j| fpca.scores()[(i, j)])
    }

    /// `a + sum_j b_j (<phi_j, mean> + score_j)`.
    pub fn linear_part(&self, mean_projections: &[T], score: impl Fn(usize) -> T) -> T {
        self.coefficients
            .iter()
            .enumerate()
            .fold(self.intercept, |acc, (j, &b)| acc + b * (mean_projections[j] + score(j)))
    }
}

/// Truncated functional linear regression of `responses` on the curves
/// summarized by `fpca`.
///
/// `e_j = (1/n) sum_i (r_i - r_bar) xi_ij`, `b_j = e_j / lambda_j`, and the
/// intercept satisfies `a + sum_j b_j <phi_j, mean> = r_bar`.
pub fn truncated_flr<T: Real>(responses: &[T], fpca: &FpcaModel<T>, q: usize) -> Result<FlrCoefficients<T>> {
    let n = fpca.n_samples();
    if responses.len() != n {
        return Err(AdrfError::Alignment {
            expected: n,
            found: responses.len(),
        });
    }
    if q == 0 || q > fpca.n_components() {
        return Err(AdrfError::Parameter(format!(
            "truncation q = {q} outside 1..={}",
            fpca.n_components()
        )));
    }
    if let Some(j) = (0..q).find(|&j| !(fpca.eigenvalues()[j] > T::zero())) {
        return Err(AdrfError::Rank { index: j + 1 });
    }
    let n_t = T::from_usize_lossy(n);
    let mean = sum(responses.iter().copied()) / n_t;
    let scores = fpca.scores();
    let coefficients: Vec<T> = (0..q)
        .map(|j| {
            let e = responses
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (i, &r)| acc + (r - mean) * scores[(i, j)])
                / n_t;
            e / fpca.eigenvalues()[j]
        })
        .collect();
    let shift = coefficients
        .iter()
        .zip(fpca.mean_projections())
        .fold(T::zero(), |acc, (&b, &m)| acc + b * m);
    Ok(FlrCoefficients {
        intercept: mean - shift,
        coefficients,
        response_mean: mean,
    })
}

/// A fitted average dose-response functional.
#[derive(Debug, Clone)]
pub struct AdrfFit<T> {
    pub method: Method,
    pub intercept: T,
    /// Added to `intercept + <b, z>` when evaluating the ADRF. For the
    /// outcome-regression fit this is `theta^T X_bar`, the covariate part
    /// of `E_X{E(Y | X, Z = z)}`; zero for the other methods.
    pub covariate_offset: T,
    pub coefficients: Vec<T>,
    pub slope: FunctionalSample<T>,
    pub theta: Option<Vec<T>>,
    pub tuning: TuningRecord<T>,
    pub fpca: Option<Arc<FpcaModel<T>>>,
}

impl<T: Real> AdrfFit<T> {
    fn from_flr(
        method: Method,
        flr: FlrCoefficients<T>,
        fpca: &Arc<FpcaModel<T>>,
        tuning: TuningRecord<T>,
    ) -> Self {
        let slope = fpca.expand(&flr.coefficients);
        AdrfFit {
            method,
            intercept: flr.intercept,
            covariate_offset: T::zero(),
            coefficients: flr.coefficients,
            slope,
            theta: None,
            tuning,
            fpca: Some(Arc::clone(fpca)),
        }
    }

    pub fn q(&self) -> usize {
        self.tuning.q
    }

    /// True when the intercept, offset, coefficients and theta are all finite.
    pub fn is_finite(&self) -> bool {
        let finite = |v: &T| v.is_finite();
        finite(&self.intercept)
            && finite(&self.covariate_offset)
            && self.coefficients.iter().all(finite)
            && self.theta.as_ref().map_or(true, |t| t.iter().all(finite))
    }

    fn flr(&self) -> FlrCoefficients<T> {
        FlrCoefficients {
            intercept: self.intercept,
            coefficients: self.coefficients.clone(),
            response_mean: T::zero(),
        }
    }
}

fn check_fpca<T: Real>(dataset: &Dataset<T>, fpca: &FpcaModel<T>) -> Result<()> {
    if fpca.n_samples() != dataset.n() {
        return Err(AdrfError::Alignment {
            expected: dataset.n(),
            found: fpca.n_samples(),
        });
    }
    if !crate::fda::same_grid(dataset.grid(), fpca.grid()) {
        return Err(AdrfError::GridMismatch);
    }
    Ok(())
}

fn check_weights<T: Real>(dataset: &Dataset<T>, weights: &WeightFit<T>) -> Result<()> {
    if weights.len() != dataset.n() {
        return Err(AdrfError::Alignment {
            expected: dataset.n(),
            found: weights.len(),
        });
    }
    Ok(())
}

/// Direct regression of `Y` on `Z`, ignoring covariates.
pub fn fit_naive<T: Real>(dataset: &Dataset<T>, fpca: &Arc<FpcaModel<T>>, q: usize) -> Result<AdrfFit<T>> {
    check_fpca(dataset, fpca)?;
    let flr = truncated_flr(dataset.outcome(), fpca, q)?;
    Ok(AdrfFit::from_flr(Method::Naive, flr, fpca, TuningRecord::plain(q)))
}

/// Weighted-outcome regression of `Y * pi` on `Z`.
pub fn fit_fsw<T: Real>(
    dataset: &Dataset<T>,
    fpca: &Arc<FpcaModel<T>>,
    weights: &WeightFit<T>,
    q: usize,
) -> Result<AdrfFit<T>> {
    check_fpca(dataset, fpca)?;
    check_weights(dataset, weights)?;
    let r: Vec<T> = dataset
        .outcome()
        .iter()
        .zip(&weights.pi)
        .map(|(&y, &p)| y * p)
        .collect();
    let flr = truncated_flr(&r, fpca, q)?;
    Ok(AdrfFit::from_flr(Method::Fsw, flr, fpca, TuningRecord::weighted(q, weights)))
}

/// Least-squares solver for `theta` on a fixed covariate matrix.
struct CovariateSolver<T: Real> {
    xt: DMatrix<T>,
    chol: nalgebra::Cholesky<T, nalgebra::Dyn>,
}

impl<T: Real> CovariateSolver<T> {
    fn new(x: &DMatrix<T>) -> Result<Self> {
        let xt = x.transpose();
        let gram = &xt * x;
        let scale = (0..gram.nrows()).fold(T::zero(), |m, i| m.max(gram[(i, i)]));
        // Reject numerically rank-deficient Gram matrices before factoring.
        let qr = x.clone().qr();
        let r = qr.r();
        let rmax = (0..r.nrows()).fold(T::zero(), |m, i| m.max(r[(i, i)].abs()));
        if let Some(c) = (0..r.nrows()).find(|&i| !(r[(i, i)].abs() > rmax * T::lit(1e-10))) {
            return Err(AdrfError::Collinearity { column: c });
        }
        let chol = gram
            .cholesky()
            .filter(|_| scale > T::zero())
            .ok_or(AdrfError::Collinearity { column: 0 })?;
        Ok(CovariateSolver { xt, chol })
    }

    fn solve(&self, residual: &[T]) -> Vec<T> {
        let rhs = &self.xt * DVector::from_column_slice(residual);
        self.chol.solve(&rhs).iter().copied().collect()
    }
}

fn sup_delta<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

fn x_theta<T: Real>(x: &DMatrix<T>, theta: &[T], i: usize) -> T {
    theta.iter().enumerate().fold(T::zero(), |acc, (j, &t)| acc + t * x[(i, j)])
}

/// Partially linear outcome regression by backfitting.
///
/// Alternates a truncated regression of `Y - theta^T X` on `Z` with a least
/// squares regression of `Y - a - <b, Z>` on `X`, starting from
/// `theta = 0`, until all parameters move by less than `1e-8` or
/// [`BACKFIT_MAX_ITERATIONS`] sweeps have run, and returns the last iterate.
///
/// When covariates are nearly collinear with the leading scores the joint
/// least-squares fixed point is ill-conditioned; the sweep cap then acts as
/// early-stopping regularization. Only a non-finite iterate is an error; use
/// [`fit_or_strict`] or [`backfit`] to insist on convergence.
pub fn fit_or<T: Real>(dataset: &Dataset<T>, fpca: &Arc<FpcaModel<T>>, q: usize) -> Result<AdrfFit<T>> {
    let outcome = backfit(dataset, fpca, q, BACKFIT_MAX_ITERATIONS)?;
    if !outcome.fit.is_finite() {
        return Err(AdrfError::Backfitting {
            iterations: outcome.iterations,
            delta: outcome.last_delta.to_f64_lossy(),
        });
    }
    Ok(outcome.fit)
}

/// Like [`fit_or`], but reports a convergence error when the tolerance is
/// not reached within the iteration cap.
pub fn fit_or_strict<T: Real>(dataset: &Dataset<T>, fpca: &Arc<FpcaModel<T>>, q: usize) -> Result<AdrfFit<T>> {
    let outcome = backfit(dataset, fpca, q, BACKFIT_MAX_ITERATIONS)?;
    if !outcome.converged || !outcome.fit.is_finite() {
        return Err(AdrfError::Backfitting {
            iterations: outcome.iterations,
            delta: outcome.last_delta.to_f64_lossy(),
        });
    }
    Ok(outcome.fit)
}

/// Result of running the backfitting iteration for at most a fixed number
/// of sweeps.
#[derive(Debug, Clone)]
pub struct BackfitOutcome<T: Real> {
    pub fit: AdrfFit<T>,
    pub converged: bool,
    pub iterations: usize,
    pub last_delta: T,
}

/// Runs at most `max_iterations` backfitting sweeps and returns the last
/// iterate together with its convergence status.
pub fn backfit<T: Real>(
    dataset: &Dataset<T>,
    fpca: &Arc<FpcaModel<T>>,
    q: usize,
    max_iterations: usize,
) -> Result<BackfitOutcome<T>> {
    check_fpca(dataset, fpca)?;
    let x = dataset.covariates();
    let y = dataset.outcome();
    let n = dataset.n();
    let solver = CovariateSolver::new(x)?;
    let tol = T::lit(BACKFIT_TOLERANCE).max(T::eps() * T::lit(1e4));

    let mut theta = vec![T::zero(); dataset.p()];
    let mut flr = truncated_flr(y, fpca, q)?;
    let mut response = vec![T::zero(); n];
    let mut residual = vec![T::zero(); n];
    let mut last_delta = T::max_value().unwrap_or_else(T::one);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        for i in 0..n {
            residual[i] = y[i] - flr.fitted(fpca, i);
        }
        let next_theta = solver.solve(&residual);
        for i in 0..n {
            response[i] = y[i] - x_theta(x, &next_theta, i);
        }
        let next_flr = truncated_flr(&response, fpca, q)?;
        let delta = sup_delta(&theta, &next_theta)
            .max(sup_delta(&flr.coefficients, &next_flr.coefficients))
            .max((flr.intercept - next_flr.intercept).abs());
        theta = next_theta;
        flr = next_flr;
        last_delta = delta;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let x_bar = dataset.covariate_means();
    let offset = theta.iter().zip(&x_bar).fold(T::zero(), |a, (&t, &m)| a + t * m);
    let mut fit = AdrfFit::from_flr(Method::Or, flr, fpca, TuningRecord::plain(q));
    fit.theta = Some(theta);
    fit.covariate_offset = offset;
    Ok(BackfitOutcome { fit, converged, iterations, last_delta })
}

/// Augmented pseudo-outcomes
/// `(Y_i - E(Y|X_i,Z_i)) pi_i + (1/n) sum_j E(Y|X_j,Z_i)`
/// from an outcome-regression fit and weights.
pub fn dr_pseudo_outcomes<T: Real>(
    dataset: &Dataset<T>,
    or_fit: &AdrfFit<T>,
    or_fpca: &FpcaModel<T>,
    pi: &[T],
) -> Result<Vec<T>> {
    let theta = or_fit
        .theta
        .as_ref()
        .ok_or(AdrfError::Precondition("doubly robust fit needs an outcome-regression fit with theta"))?;
    if pi.len() != dataset.n() {
        return Err(AdrfError::Alignment {
            expected: dataset.n(),
            found: pi.len(),
        });
    }
    let x = dataset.covariates();
    let x_bar = dataset.covariate_means();
    let offset_bar = theta.iter().zip(&x_bar).fold(T::zero(), |a, (&t, &m)| a + t * m);
    let flr = or_fit.flr();
    Ok((0..dataset.n())
        .map(|i| {
            let linear = flr.fitted(or_fpca, i);
            let predicted = linear + x_theta(x, theta, i);
            (dataset.outcome()[i] - predicted) * pi[i] + linear + offset_bar
        })
        .collect())
}

/// Doubly robust fit combining an outcome-regression fit with weights.
pub fn fit_dr<T: Real>(
    dataset: &Dataset<T>,
    fpca: &Arc<FpcaModel<T>>,
    or_fit: &AdrfFit<T>,
    weights: &WeightFit<T>,
    q: usize,
) -> Result<AdrfFit<T>> {
    check_fpca(dataset, fpca)?;
    check_weights(dataset, weights)?;
    let or_fpca = or_fit.fpca.as_deref().unwrap_or(fpca);
    if or_fpca.n_samples() != dataset.n() {
        return Err(AdrfError::Alignment {
            expected: dataset.n(),
            found: or_fpca.n_samples(),
        });
    }
    let r = dr_pseudo_outcomes(dataset, or_fit, or_fpca, &weights.pi)?;
    let flr = truncated_flr(&r, fpca, q)?;
    Ok(AdrfFit::from_flr(Method::Dr, flr, fpca, TuningRecord::weighted(q, weights)))
}

/// `E{Y*(z)}` estimated by a fit.
pub fn adrf_eval<T: Real>(fit: &AdrfFit<T>, z: &FunctionalSample<T>) -> Result<T> {
    let linear = crate::fda::inner_product(&fit.slope, z)?;
    Ok(fit.intercept + fit.covariate_offset + linear)
}

/// `E{Y*(z1) - Y*(z2)} = <b, z1 - z2>`.
pub fn ate<T: Real>(fit: &AdrfFit<T>, z1: &FunctionalSample<T>, z2: &FunctionalSample<T>) -> Result<T> {
    z1.check_grid(z2)?;
    let diff = z1.axpy(-T::one(), z2)?;
    crate::fda::inner_product(&fit.slope, &diff)
}

/// All requested fits for one dataset at a shared truncation, with the
/// weights fitted once at `(h, k)` and reused by FSW and DR.
pub struct FitBundle<T> {
    pub fits: BTreeMap<Method, AdrfFit<T>>,
    pub weights: Option<WeightFit<T>>,
}

/// Fits `methods` on the full dataset. `distances` are the pairwise curve
/// distances; weights are estimated only if a weighted method is requested.
pub fn fit_methods<T: Real>(
    dataset: &Dataset<T>,
    distances: &DMatrix<T>,
    methods: &[Method],
    q: usize,
    h: T,
    k: usize,
    rho: RhoFamily,
) -> Result<FitBundle<T>> {
    let model = Arc::new(crate::fda::fpca(dataset.curves(), q.min(dataset.n()).min(dataset.grid().len()))?);
    let weights = if methods.iter().any(|m| m.needs_weights()) {
        let basis = CovariateBasis::fit(dataset.covariates(), k)?;
        Some(estimate_weights_from_design(distances, &basis.design, h, rho, &SolverOptions::default())?)
    } else {
        None
    };
    let mut fits = BTreeMap::new();
    let needs_or = methods.iter().any(|m| matches!(m, Method::Or | Method::Dr));
    let or_fit = if needs_or { Some(fit_or(dataset, &model, q)?) } else { None };
    for &m in methods {
        let fit = match m {
            Method::Naive => fit_naive(dataset, &model, q)?,
            Method::Fsw => fit_fsw(dataset, &model, weights.as_ref().expect("weights"), q)?,
            Method::Or => or_fit.clone().expect("or fit"),
            Method::Dr => fit_dr(
                dataset,
                &model,
                or_fit.as_ref().expect("or fit"),
                weights.as_ref().expect("weights"),
                q,
            )?,
        };
        fits.insert(m, fit);
    }
    Ok(FitBundle { fits, weights })
}

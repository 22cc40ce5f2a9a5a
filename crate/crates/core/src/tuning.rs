//! L-fold cross-validation over the bandwidth `h`, sieve size `k` and
//! truncation `q`.
//!
//! For every fold the FPCA, the covariate sieve and the weights are refit
//! on the training part; held-out curves are scored against the training
//! FPCA and held-out weights solve a fresh local dual centred at the
//! held-out curve over the training neighbours.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{AdrfError, Result};
use crate::estimators::{
    dr_pseudo_outcomes, fit_or, truncated_flr, AdrfFit, FlrCoefficients, Method,
};
use crate::fda::{fpca, FpcaModel};
use crate::fsw::{
    estimate_weights_from_design, median_distance, pairwise_distances, RhoFamily, SolverOptions, WeightFit,
    WeightModel, MAX_FAILURE_FRACTION,
};
use crate::scalar::Real;
use crate::sieve::sieve_degree;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_BANDWIDTH_MULTIPLIERS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const DEFAULT_MAX_Q: usize = 8;

/// Bandwidth candidates, either absolute or as multiples of the median
/// pairwise L2 distance between curves.
#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthGrid<T> {
    MedianMultiples(Vec<T>),
    Absolute(Vec<T>),
}

impl<T: Real> BandwidthGrid<T> {
    pub fn resolve(&self, median: T) -> Vec<T> {
        match self {
            BandwidthGrid::MedianMultiples(m) => m.iter().map(|&c| c * median).collect(),
            BandwidthGrid::Absolute(h) => h.clone(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            BandwidthGrid::MedianMultiples(v) | BandwidthGrid::Absolute(v) => v.is_empty(),
        }
    }
}

impl<T: Real> Default for BandwidthGrid<T> {
    fn default() -> Self {
        BandwidthGrid::MedianMultiples(DEFAULT_BANDWIDTH_MULTIPLIERS.iter().map(|&c| T::lit(c)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig<T> {
    pub folds: usize,
    pub h_grid: BandwidthGrid<T>,
    /// `None` selects `{p + 1, 2p + 1, 3p + 1}`.
    pub k_grid: Option<Vec<usize>>,
    pub q_grid: Vec<usize>,
    pub seed: u64,
    pub rho: RhoFamily,
}

impl<T: Real> Default for CvConfig<T> {
    fn default() -> Self {
        CvConfig {
            folds: DEFAULT_FOLDS,
            h_grid: BandwidthGrid::default(),
            k_grid: None,
            q_grid: (1..=DEFAULT_MAX_Q).collect(),
            seed: 0,
            rho: RhoFamily::default(),
        }
    }
}

impl<T: Real> CvConfig<T> {
    pub fn k_candidates(&self, p: usize) -> Vec<usize> {
        self.k_grid.clone().unwrap_or_else(|| vec![p + 1, 2 * p + 1, 3 * p + 1])
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.folds < 2 {
            return Err(AdrfError::Parameter(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.h_grid.is_empty() || self.q_grid.is_empty() || self.k_candidates(p).is_empty() {
            return Err(AdrfError::Parameter("candidate grids must be nonempty".into()));
        }
        if self.q_grid.contains(&0) {
            return Err(AdrfError::Parameter("q candidates must be positive".into()));
        }
        for k in self.k_candidates(p) {
            sieve_degree(k, p)?;
        }
        Ok(())
    }
}

/// A partition of `0..n` into `L` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    assignment: Vec<usize>,
    count: usize,
}

impl Folds {
    /// Random balanced folds: a seeded shuffle, then position `r` goes to
    /// fold `r mod L`, so fold sizes differ by at most one.
    pub fn new(n: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 || folds > n {
            return Err(AdrfError::Parameter(format!("cannot split {n} observations into {folds} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            assignment[i] = pos % folds;
        }
        Ok(Folds {
            assignment,
            count: folds,
        })
    }

    /// Folds from an explicit label per observation; labels must cover
    /// `0..L` with every fold nonempty.
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let count = assignment.iter().max().map_or(0, |&m| m + 1);
        if count < 2 || (0..count).any(|f| !assignment.contains(&f)) {
            return Err(AdrfError::Parameter("fold labels must cover 0..L with L >= 2".into()));
        }
        Ok(Folds { assignment, count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn held_out(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Training-side quantities of one fold shared by all candidates.
struct FoldContext<T: Real> {
    index: usize,
    test: Vec<usize>,
    train_data: Dataset<T>,
    fpca: Arc<FpcaModel<T>>,
    /// Row r: scores of held-out curve `test[r]` on the training FPCA.
    test_scores: Vec<Vec<T>>,
    train_distances: DMatrix<T>,
    /// |test| x |train|.
    test_distances: DMatrix<T>,
}

/// Precomputed folds for repeated CV loss evaluation on one dataset.
pub struct CvData<'a, T: Real> {
    dataset: &'a Dataset<T>,
    distances: DMatrix<T>,
    folds: Folds,
    contexts: Vec<FoldContext<T>>,
    solver: SolverOptions,
}

impl<'a, T: Real> CvData<'a, T> {
    /// Prepares every fold with an FPCA of up to `max_q` components.
    pub fn new(dataset: &'a Dataset<T>, folds: Folds, max_q: usize) -> Result<Self> {
        let distances = pairwise_distances(dataset.curves())?;
        Self::with_distances(dataset, folds, max_q, distances)
    }

    pub fn with_distances(dataset: &'a Dataset<T>, folds: Folds, max_q: usize, distances: DMatrix<T>) -> Result<Self> {
        if folds.n() != dataset.n() {
            return Err(AdrfError::Alignment {
                expected: dataset.n(),
                found: folds.n(),
            });
        }
        let contexts = (0..folds.count())
            .into_par_iter()
            .map(|f| {
                let test = folds.held_out(f);
                let train = folds.training(f);
                if train.len() < 2 {
                    return Err(AdrfError::FoldSize {
                        fold: f,
                        size: train.len(),
                        k: 0,
                    });
                }
                let train_data = dataset.subset(&train);
                let m = dataset.grid().len();
                let j = max_q.min(train.len()).min(m).max(1);
                let model = Arc::new(fpca(train_data.curves(), j)?);
                let test_scores = test
                    .iter()
                    .map(|&i| model.pc_scores(&dataset.curves()[i]))
                    .collect::<Result<Vec<_>>>()?;
                let train_distances = distances.select_rows(&train).select_columns(&train);
                let test_distances = distances.select_rows(&test).select_columns(&train);
                Ok(FoldContext {
                    index: f,
                    test,
                    train_data,
                    fpca: model,
                    test_scores,
                    train_distances,
                    test_distances,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CvData {
            dataset,
            distances,
            folds,
            contexts,
            solver: SolverOptions::default(),
        })
    }

    pub fn distances(&self) -> &DMatrix<T> {
        &self.distances
    }

    pub fn folds(&self) -> &Folds {
        &self.folds
    }

    pub fn dataset(&self) -> &Dataset<T> {
        self.dataset
    }
}

/// Training weights plus held-out weights for one fold and one `(h, k)`.
struct FoldWeights<T> {
    train: WeightFit<T>,
    test: Vec<T>,
}

/// Held-out residual sum of `r_i - (a + sum_j b_j (<phi_j, mu> + xi_ij))`.
fn held_out_sse<T: Real>(ctx: &FoldContext<T>, flr: &FlrCoefficients<T>, response: impl Fn(usize, usize) -> T) -> T {
    let mp = ctx.fpca.mean_projections();
    ctx.test.iter().enumerate().fold(T::zero(), |acc, (r, &i)| {
        let fitted = flr.linear_part(mp, |j| ctx.test_scores[r][j]);
        let e = response(r, i) - fitted;
        acc + e * e
    })
}

fn check_q<T: Real>(ctx: &FoldContext<T>, q: usize) -> Result<()> {
    if q > ctx.fpca.n_components() {
        return Err(AdrfError::Parameter(format!(
            "truncation q = {q} exceeds the {} components available in fold {}",
            ctx.fpca.n_components(),
            ctx.index
        )));
    }
    Ok(())
}

impl<'a, T: Real> CvData<'a, T> {
    fn x_row(&self, i: usize) -> Vec<T> {
        self.dataset.covariate_row(i)
    }

    fn weights(&self, h: T, k: usize, rho: RhoFamily) -> Result<Vec<FoldWeights<T>>> {
        self.contexts
            .iter()
            .map(|ctx| {
                let n_train = ctx.train_data.n();
                if 2 * k > n_train {
                    return Err(AdrfError::FoldSize {
                        fold: ctx.index,
                        size: n_train,
                        k,
                    });
                }
                let model = WeightModel::fit(ctx.train_data.covariates(), k)?;
                let train =
                    estimate_weights_from_design(&ctx.train_distances, &model.basis.design, h, rho, &self.solver)?;
                let mut failed = 0;
                let mut test = Vec::with_capacity(ctx.test.len());
                for (r, &i) in ctx.test.iter().enumerate() {
                    let d: Vec<T> = ctx.test_distances.row(r).iter().copied().collect();
                    let (pi, sol) = model.weight_at(&d, &self.x_row(i), h, rho, &self.solver)?;
                    if !sol.converged() {
                        failed += 1;
                    }
                    test.push(pi);
                }
                if failed > 0 && failed as f64 > MAX_FAILURE_FRACTION * ctx.test.len() as f64 {
                    return Err(AdrfError::WeightFailures {
                        failed,
                        total: ctx.test.len(),
                        first: ctx.test[0],
                    });
                }
                Ok(FoldWeights { train, test })
            })
            .collect()
    }

    fn fsw_loss_with(&self, weights: &[FoldWeights<T>], q: usize) -> Result<T> {
        let mut total = T::zero();
        for (ctx, w) in self.contexts.iter().zip(weights) {
            check_q(ctx, q)?;
            let r: Vec<T> = ctx.train_data.outcome().iter().zip(&w.train.pi).map(|(&y, &p)| y * p).collect();
            let flr = truncated_flr(&r, &ctx.fpca, q)?;
            let y = self.dataset.outcome();
            total += held_out_sse(ctx, &flr, |r, i| y[i] * w.test[r]);
        }
        Ok(total)
    }

    fn or_fits(&self, q: usize) -> Result<Vec<AdrfFit<T>>> {
        self.contexts
            .iter()
            .map(|ctx| {
                check_q(ctx, q)?;
                fit_or(&ctx.train_data, &ctx.fpca, q)
            })
            .collect()
    }

    fn or_loss_with(&self, fits: &[AdrfFit<T>]) -> T {
        let x = self.dataset.covariates();
        let y = self.dataset.outcome();
        let mut total = T::zero();
        for (ctx, fit) in self.contexts.iter().zip(fits) {
            let theta = fit.theta.as_deref().unwrap_or(&[]);
            let flr = flr_of(fit);
            total += held_out_sse(ctx, &flr, |_, i| {
                y[i] - theta.iter().enumerate().fold(T::zero(), |a, (c, &t)| a + t * x[(i, c)])
            });
        }
        total
    }

    fn dr_loss_with(&self, weights: &[FoldWeights<T>], or_fits: &[AdrfFit<T>], q: usize) -> Result<T> {
        let x = self.dataset.covariates();
        let y = self.dataset.outcome();
        let mut total = T::zero();
        for ((ctx, w), or_fit) in self.contexts.iter().zip(weights).zip(or_fits) {
            let pseudo = dr_pseudo_outcomes(&ctx.train_data, or_fit, &ctx.fpca, &w.train.pi)?;
            let dr = truncated_flr(&pseudo, &ctx.fpca, q)?;
            let theta = or_fit.theta.as_deref().unwrap_or(&[]);
            let or_flr = flr_of(or_fit);
            // Covariate average over the held-out fold only.
            let n_test = T::from_usize_lossy(ctx.test.len());
            let offset = ctx.test.iter().fold(T::zero(), |acc, &j| {
                acc + theta.iter().enumerate().fold(T::zero(), |a, (c, &t)| a + t * x[(j, c)])
            }) / n_test;
            let mp = ctx.fpca.mean_projections();
            total += held_out_sse(ctx, &dr, |r, i| {
                let linear = or_flr.linear_part(mp, |j| ctx.test_scores[r][j]);
                let x_theta = theta.iter().enumerate().fold(T::zero(), |a, (c, &t)| a + t * x[(i, c)]);
                (y[i] - linear - x_theta) * w.test[r] + linear + offset
            });
        }
        Ok(total)
    }

    fn naive_loss(&self, q: usize) -> Result<T> {
        let y = self.dataset.outcome();
        let mut total = T::zero();
        for ctx in &self.contexts {
            check_q(ctx, q)?;
            let flr = truncated_flr(ctx.train_data.outcome(), &ctx.fpca, q)?;
            total += held_out_sse(ctx, &flr, |_, i| y[i]);
        }
        Ok(total)
    }

    /// `CV^FSW(h, k, q)`.
    pub fn loss_fsw(&self, h: T, k: usize, q: usize, rho: RhoFamily) -> Result<T> {
        let w = self.weights(h, k, rho)?;
        self.fsw_loss_with(&w, q)
    }

    /// `CV^OR(q)`.
    pub fn loss_or(&self, q: usize) -> Result<T> {
        Ok(self.or_loss_with(&self.or_fits(q)?))
    }

    /// `CV^DR(q)` with weights at `(h, k)`.
    pub fn loss_dr(&self, h: T, k: usize, q: usize, rho: RhoFamily) -> Result<T> {
        let w = self.weights(h, k, rho)?;
        let fits = self.or_fits(q)?;
        self.dr_loss_with(&w, &fits, q)
    }

    /// Held-out loss of the unweighted regression of `Y` on `Z`.
    pub fn loss_naive(&self, q: usize) -> Result<T> {
        self.naive_loss(q)
    }
}

fn flr_of<T: Real>(fit: &AdrfFit<T>) -> FlrCoefficients<T> {
    FlrCoefficients {
        intercept: fit.intercept,
        coefficients: fit.coefficients.clone(),
        response_mean: T::zero(),
    }
}

fn max_q(q: usize) -> usize {
    q.max(1)
}

pub fn cv_loss_fsw<T: Real>(dataset: &Dataset<T>, h: T, k: usize, q: usize, folds: &Folds, rho: RhoFamily) -> Result<T> {
    CvData::new(dataset, folds.clone(), max_q(q))?.loss_fsw(h, k, q, rho)
}

pub fn cv_loss_or<T: Real>(dataset: &Dataset<T>, q: usize, folds: &Folds) -> Result<T> {
    CvData::new(dataset, folds.clone(), max_q(q))?.loss_or(q)
}

pub fn cv_loss_dr<T: Real>(dataset: &Dataset<T>, h: T, k: usize, q: usize, folds: &Folds, rho: RhoFamily) -> Result<T> {
    CvData::new(dataset, folds.clone(), max_q(q))?.loss_dr(h, k, q, rho)
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct CvEntry<T> {
    pub h: Option<T>,
    pub k: Option<usize>,
    pub q: usize,
    /// `Err` carries the failure message of a candidate that could not be fit.
    pub loss: std::result::Result<T, String>,
}

impl<T: Real> fmt::Display for CvEntry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.h.map_or("-".to_string(), |h| format!("{h:.17e}"));
        let k = self.k.map_or("-".to_string(), |k| k.to_string());
        match &self.loss {
            Ok(l) => write!(f, "{h},{k},{},{l:.17e}", self.q),
            Err(e) => write!(f, "{h},{k},{},NA ({e})", self.q),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuningResult<T> {
    pub method: Method,
    pub h: Option<T>,
    pub k: Option<usize>,
    pub q: usize,
    pub loss: T,
    pub table: Vec<CvEntry<T>>,
}

fn candidate_order<T: Real>(a: &CvEntry<T>, b: &CvEntry<T>) -> std::cmp::Ordering {
    a.q.cmp(&b.q)
        .then(a.k.cmp(&b.k))
        .then(a.h.partial_cmp(&b.h).unwrap_or(std::cmp::Ordering::Equal))
}

/// Exhaustive grid search. The FSW and DR criteria search `(h, k, q)`;
/// OR and Naive search `q` only. Ties go to the smallest `q`, then `k`,
/// then `h`.
pub fn select_tuning<T: Real>(dataset: &Dataset<T>, config: &CvConfig<T>, method: Method) -> Result<TuningResult<T>> {
    config.validate(dataset.p())?;
    let folds = Folds::new(dataset.n(), config.folds, config.seed)?;
    let q_max = config.q_grid.iter().copied().max().unwrap_or(1);
    let cv = CvData::new(dataset, folds, q_max)?;
    select_tuning_with(&cv, config, method)
}

/// Grid search on prepared folds.
pub fn select_tuning_with<T: Real>(cv: &CvData<'_, T>, config: &CvConfig<T>, method: Method) -> Result<TuningResult<T>> {
    let p = cv.dataset.p();
    config.validate(p)?;
    let mut q_grid = config.q_grid.clone();
    q_grid.sort_unstable();
    q_grid.dedup();
    let hk: Vec<(T, usize)> = {
        let hs = config.h_grid.resolve(median_distance(&cv.distances));
        let mut ks = config.k_candidates(p);
        ks.sort_unstable();
        ks.dedup();
        ks.iter().flat_map(|&k| hs.iter().map(move |&h| (h, k))).collect()
    };
    let rho = config.rho;
    let mut table: Vec<CvEntry<T>> = match method {
        Method::Fsw | Method::Dr => {
            let or_fits: Vec<std::result::Result<Vec<AdrfFit<T>>, String>> = if method == Method::Dr {
                q_grid.par_iter().map(|&q| cv.or_fits(q).map_err(|e| e.to_string())).collect()
            } else {
                Vec::new()
            };
            hk.par_iter()
                .flat_map_iter(|&(h, k)| {
                    let weights = cv.weights(h, k, rho);
                    q_grid
                        .iter()
                        .enumerate()
                        .map(|(qi, &q)| {
                            let loss = match &weights {
                                Err(e) => Err(e.to_string()),
                                Ok(w) if method == Method::Fsw => cv.fsw_loss_with(w, q).map_err(|e| e.to_string()),
                                Ok(w) => match &or_fits[qi] {
                                    Err(e) => Err(e.clone()),
                                    Ok(fits) => cv.dr_loss_with(w, fits, q).map_err(|e| e.to_string()),
                                },
                            };
                            CvEntry {
                                h: Some(h),
                                k: Some(k),
                                q,
                                loss,
                            }
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        Method::Or | Method::Naive => q_grid
            .par_iter()
            .map(|&q| {
                let loss = if method == Method::Or { cv.loss_or(q) } else { cv.loss_naive(q) };
                CvEntry {
                    h: None,
                    k: None,
                    q,
                    loss: loss.map_err(|e| e.to_string()),
                }
            })
            .collect(),
    };
    for e in &mut table {
        if let Ok(l) = e.loss {
            if !l.is_finite() {
                e.loss = Err("non-finite loss".into());
            }
        }
    }
    table.sort_by(candidate_order);
    let mut best: Option<&CvEntry<T>> = None;
    for e in &table {
        if let Ok(l) = e.loss {
            if best.map_or(true, |b| l < *b.loss.as_ref().unwrap()) {
                best = Some(e);
            }
        }
    }
    let Some(best) = best.cloned() else {
        return Err(AdrfError::AllCandidatesFailed(
            table.iter().filter(|e| e.loss.is_err()).map(|e| e.to_string()).collect(),
        ));
    };
    Ok(TuningResult {
        method,
        h: best.h,
        k: best.k,
        q: best.q,
        loss: best.loss.unwrap(),
        table,
    })
}

//! Simulation designs (i)-(iv), the true slope, the ISE metric and the
//! Monte Carlo benchmark runner.
//!
//! Treatments are `Z_i = sum_{j<=6} A_ij phi_j` on `[0, 1]` with Fourier
//! eigenfunctions and score standard deviations `(4, 2 sqrt 3, 2 sqrt 2, 2, 1, 1/sqrt 2)`;
//! the true ADRF slope is `b = 2 phi_1 + phi_2 + phi_3 / 2 + phi_4 / 2`.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{AdrfError, Result};
use crate::estimators::{fit_methods, Method};
use crate::fda::{FunctionalSample, Grid};
use crate::tuning::{select_tuning_with, CvConfig, CvData, Folds, TuningResult};

pub const DEFAULT_GRID_LEN: usize = 101;
pub const SCORE_SDS: [f64; 6] = [4.0, 3.464_101_615_137_754_6, 2.828_427_124_746_190_3, 2.0, 1.0, 0.707_106_781_186_547_5];
/// Coefficients of the true slope on `phi_1..phi_6`.
pub const SLOPE_COEFFICIENTS: [f64; 6] = [2.0, 1.0, 0.5, 0.5, 0.0, 0.0];
pub const TRUE_INTERCEPT: f64 = 1.0;
pub const MIN_SAMPLE_SIZE: usize = 20;

/// `phi_{2m-1}(t) = sqrt 2 sin(2 m pi t)`, `phi_{2m}(t) = sqrt 2 cos(2 m pi t)`, `j` 1-based.
pub fn eigenfunction(j: usize, t: f64) -> f64 {
    let m = j.div_ceil(2) as f64;
    if j % 2 == 1 {
        SQRT_2 * (2.0 * m * PI * t).sin()
    } else {
        SQRT_2 * (2.0 * m * PI * t).cos()
    }
}

pub fn eigenfunction_curve(grid: &Arc<Grid<f64>>, j: usize) -> FunctionalSample<f64> {
    FunctionalSample::from_fn(Arc::clone(grid), |t| eigenfunction(j, t)).expect("finite eigenfunction")
}

pub fn true_slope(grid: &Arc<Grid<f64>>) -> FunctionalSample<f64> {
    FunctionalSample::from_fn(Arc::clone(grid), |t| {
        SLOPE_COEFFICIENTS
            .iter()
            .enumerate()
            .map(|(j, &c)| c * eigenfunction(j + 1, t))
            .sum()
    })
    .expect("finite slope")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    I,
    Ii,
    Iii,
    Iv,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [ModelId::I, ModelId::Ii, ModelId::Iii, ModelId::Iv];

    pub fn tag(self) -> &'static str {
        match self {
            ModelId::I => "i",
            ModelId::Ii => "ii",
            ModelId::Iii => "iii",
            ModelId::Iv => "iv",
        }
    }

    pub fn covariate_dim(self) -> usize {
        match self {
            ModelId::I | ModelId::Ii => 1,
            ModelId::Iii | ModelId::Iv => 2,
        }
    }

    /// Covariate coefficients when the outcome is linear in `X`.
    pub fn true_theta(self) -> Option<Vec<f64>> {
        match self {
            ModelId::I => Some(vec![2.0]),
            ModelId::Iii => Some(vec![2.0, 2.0]),
            ModelId::Ii | ModelId::Iv => None,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelId {
    type Err = AdrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(ModelId::I),
            "ii" | "2" => Ok(ModelId::Ii),
            "iii" | "3" => Ok(ModelId::Iii),
            "iv" | "4" => Ok(ModelId::Iv),
            other => Err(AdrfError::Parameter(format!("unknown simulation model `{other}`"))),
        }
    }
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct SimModel {
    pub id: ModelId,
    pub n: usize,
    pub seed: u64,
    pub grid_len: usize,
    /// Standard deviation of the covariate noise (1 in the reference design).
    pub covariate_noise_sd: f64,
    /// Standard deviation of the outcome noise (5 in the reference design).
    pub outcome_noise_sd: f64,
    /// When false, the covariates are built from normal draws independent
    /// of the treatment scores, so there is no confounding.
    pub confounded: bool,
}

impl SimModel {
    pub fn new(id: ModelId, n: usize, seed: u64) -> Self {
        SimModel {
            id,
            n,
            seed,
            grid_len: DEFAULT_GRID_LEN,
            covariate_noise_sd: 1.0,
            outcome_noise_sd: 5.0,
            confounded: true,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.covariate_noise_sd = 0.0;
        self.outcome_noise_sd = 0.0;
        self
    }

    pub fn unconfounded(mut self) -> Self {
        self.confounded = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < MIN_SAMPLE_SIZE {
            return Err(AdrfError::Parameter(format!(
                "simulation needs n >= {MIN_SAMPLE_SIZE}, got {}",
                self.n
            )));
        }
        if self.grid_len < 3 {
            return Err(AdrfError::Parameter("grid needs at least 3 points".into()));
        }
        if !(self.covariate_noise_sd >= 0.0 && self.outcome_noise_sd >= 0.0) {
            return Err(AdrfError::Parameter("noise standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset<f64>,
    pub slope: FunctionalSample<f64>,
    pub intercept: f64,
    pub theta: Option<Vec<f64>>,
    /// n x 6 true scores `A_ij`.
    pub scores: DMatrix<f64>,
}

impl SimData {
    /// Population ADRF `1 + <b, z>`.
    pub fn true_adrf(&self, z: &FunctionalSample<f64>) -> Result<f64> {
        Ok(self.intercept + crate::fda::inner_product(&self.slope, z)?)
    }
}

/// Independent normal stream number `stream` of a replication seed.
fn normal_stream(seed: u64, stream: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    move || StandardNormal.sample(&mut rng)
}

const STREAM_SCORES: u64 = 1;
const STREAM_COVARIATE_NOISE: u64 = 2;
const STREAM_OUTCOME_NOISE: u64 = 3;
const STREAM_INDEPENDENT_COVARIATES: u64 = 4;

pub fn generate(model: &SimModel) -> Result<SimData> {
    model.validate()?;
    let n = model.n;
    let grid = Arc::new(Grid::uniform(0.0, 1.0, model.grid_len)?);
    let basis: Vec<Vec<f64>> = (1..=6)
        .map(|j| grid.points().iter().map(|&t| eigenfunction(j, t)).collect())
        .collect();

    let mut u_draw = normal_stream(model.seed, STREAM_SCORES);
    let mut u = DMatrix::zeros(n, 6);
    for i in 0..n {
        for j in 0..6 {
            u[(i, j)] = u_draw();
        }
    }
    let scores = DMatrix::from_fn(n, 6, |i, j| SCORE_SDS[j] * u[(i, j)]);
    let curves: Vec<FunctionalSample<f64>> = (0..n)
        .map(|i| {
            let values = (0..grid.len())
                .map(|t| (0..6).map(|j| scores[(i, j)] * basis[j][t]).sum())
                .collect();
            FunctionalSample::new(Arc::clone(&grid), values)
        })
        .collect::<Result<_>>()?;

    // U_i1, U_i2 drive the covariates; the unconfounded variant swaps in
    // fresh draws independent of the treatment.
    let driver = if model.confounded {
        DMatrix::from_fn(n, 2, |i, j| u[(i, j)])
    } else {
        let mut draw = normal_stream(model.seed, STREAM_INDEPENDENT_COVARIATES);
        let mut d = DMatrix::zeros(n, 2);
        for i in 0..n {
            for j in 0..2 {
                d[(i, j)] = draw();
            }
        }
        d
    };
    let mut eps1 = normal_stream(model.seed, STREAM_COVARIATE_NOISE);
    let mut eps2 = normal_stream(model.seed, STREAM_OUTCOME_NOISE);
    let p = model.id.covariate_dim();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let e = model.covariate_noise_sd * eps1();
        match model.id {
            ModelId::I | ModelId::Ii => x[(i, 0)] = driver[(i, 0)] + e,
            ModelId::Iii | ModelId::Iv => {
                x[(i, 0)] = (driver[(i, 0)] + 1.0).powi(2) + e;
                x[(i, 1)] = driver[(i, 1)];
            }
        }
    }

    let linear: Vec<f64> = (0..n)
        .map(|i| (0..6).map(|j| SLOPE_COEFFICIENTS[j] * scores[(i, j)]).sum::<f64>())
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let covariate_part = match model.id {
                ModelId::I => 2.0 * x[(i, 0)],
                ModelId::Ii => 3.0 * x[(i, 0)].powi(2) + 1.5 * x[(i, 0)].sin(),
                ModelId::Iii => 2.0 * x[(i, 0)] + 2.0 * x[(i, 1)],
                ModelId::Iv => 2.0 * x[(i, 0)] + 2.0 * x[(i, 0)].cos() + 5.5 * x[(i, 1)].sin(),
            };
            TRUE_INTERCEPT + linear[i] + covariate_part + model.outcome_noise_sd * eps2()
        })
        .collect();

    let dataset = Dataset::new(curves, x, y)?;
    Ok(SimData {
        slope: true_slope(&grid),
        dataset,
        intercept: TRUE_INTERCEPT,
        theta: model.id.true_theta(),
        scores,
    })
}

/// Integrated squared error `int (b_hat - b)^2`.
pub fn ise(b_hat: &FunctionalSample<f64>, b_true: &FunctionalSample<f64>) -> Result<f64> {
    let d = b_hat.axpy(-1.0, b_true)?;
    crate::fda::inner_product(&d, &d)
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub models: Vec<ModelId>,
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub base_seed: u64,
    pub cv: CvConfig<f64>,
    pub grid_len: usize,
    /// Largest tolerated fraction of failed replications per cell.
    pub max_failure_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            models: ModelId::ALL.to_vec(),
            sizes: vec![200, 500],
            methods: Method::ALL.to_vec(),
            replications: 200,
            base_seed: 1,
            cv: CvConfig::default(),
            grid_len: DEFAULT_GRID_LEN,
            max_failure_fraction: 0.05,
        }
    }
}

/// Outcome of a single replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub seed: u64,
    pub tuning: Option<(f64, usize, usize)>,
    /// ISE per method; `Err` holds the failure message.
    pub ise: BTreeMap<Method, std::result::Result<f64, String>>,
    /// Intercept and covariate coefficients of the OR fit, if requested.
    pub or_intercept: Option<f64>,
    pub or_theta: Option<Vec<f64>>,
}

/// Generates one dataset, tunes `(h, k, q)` by the FSW criterion and
/// fits every requested method with the shared `q`.
pub fn run_replication(model: &SimModel, methods: &[Method], cv: &CvConfig<f64>) -> Result<(Replication, TuningResult<f64>)> {
    let data = generate(model)?;
    let d = &data.dataset;
    let mut cv = cv.clone();
    cv.seed = model.seed;
    let folds = Folds::new(d.n(), cv.folds, cv.seed)?;
    let q_max = cv.q_grid.iter().copied().max().unwrap_or(1);
    let cv_data = CvData::new(d, folds, q_max)?;
    let tuning = select_tuning_with(&cv_data, &cv, Method::Fsw)?;
    let (h, k, q) = (tuning.h.expect("fsw tunes h"), tuning.k.expect("fsw tunes k"), tuning.q);
    let mut ise_map = BTreeMap::new();
    let mut or_intercept = None;
    let mut or_theta = None;
    match fit_methods(d, cv_data.distances(), methods, q, h, k, cv.rho) {
        Ok(bundle) => {
            for (m, fit) in &bundle.fits {
                ise_map.insert(*m, ise(&fit.slope, &data.slope).map_err(|e| e.to_string()));
                if *m == Method::Or {
                    or_intercept = Some(fit.intercept);
                    or_theta = fit.theta.clone();
                }
            }
        }
        Err(e) => {
            for &m in methods {
                ise_map.insert(m, Err(e.to_string()));
            }
        }
    }
    Ok((
        Replication {
            seed: model.seed,
            tuning: Some((h, k, q)),
            ise: ise_map,
            or_intercept,
            or_theta,
        },
        tuning,
    ))
}

/// Summary of one (model, n, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub model: ModelId,
    pub n: usize,
    pub method: Method,
    /// Mean and standard deviation of ISE x 100 over successful replications.
    pub mean: f64,
    pub sd: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub replications: usize,
    pub base_seed: u64,
    pub cells: Vec<CellSummary>,
    /// Per (model, n), the replication records in seed order.
    pub runs: BTreeMap<(ModelId, usize), Vec<Replication>>,
}

impl BenchmarkReport {
    pub fn cell(&self, model: ModelId, n: usize, method: Method) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.n == n && c.method == method)
    }

    pub fn mean(&self, model: ModelId, n: usize, method: Method) -> Option<f64> {
        self.cell(model, n, method).map(|c| c.mean)
    }

    /// How often each truncation was selected for a (model, n).
    pub fn q_histogram(&self, model: ModelId, n: usize) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for r in self.runs.get(&(model, n)).into_iter().flatten() {
            if let Some((_, _, q)) = r.tuning {
                *out.entry(q).or_insert(0) += 1;
            }
        }
        out
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# ISE x 100 of the slope: mean (sd); replications = {}, base seed = {}", self.replications, self.base_seed)?;
        writeln!(f, "model,n,method,mean,sd,ok,na")?;
        for c in &self.cells {
            writeln!(
                f,
                "{},{},{},{:.2},{:.2},{},{}",
                c.model, c.n, c.method, c.mean, c.sd, c.successes, c.failures
            )?;
        }
        Ok(())
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Runs every (model, n) cell; replication `r` of every cell uses seed
/// `base_seed + r`. Replications run concurrently and are gathered in
/// seed order, so the report does not depend on scheduling.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    run_benchmark_with_progress(config, |_, _, _| {})
}

pub fn run_benchmark_with_progress(
    config: &BenchmarkConfig,
    progress: impl Fn(ModelId, usize, usize) + Sync,
) -> Result<BenchmarkReport> {
    if config.replications == 0 {
        return Err(AdrfError::Parameter("replications must be at least 1".into()));
    }
    if config.methods.is_empty() || config.models.is_empty() || config.sizes.is_empty() {
        return Err(AdrfError::Parameter("benchmark needs models, sizes and methods".into()));
    }
    let mut cells = Vec::new();
    let mut runs = BTreeMap::new();
    for &id in &config.models {
        for &n in &config.sizes {
            let reps: Vec<Replication> = (0..config.replications)
                .into_par_iter()
                .map(|r| {
                    let mut model = SimModel::new(id, n, config.base_seed.wrapping_add(r as u64));
                    model.grid_len = config.grid_len;
                    let out = match run_replication(&model, &config.methods, &config.cv) {
                        Ok((rep, _)) => rep,
                        Err(e) => Replication {
                            seed: model.seed,
                            tuning: None,
                            ise: config.methods.iter().map(|&m| (m, Err(e.to_string()))).collect(),
                            or_intercept: None,
                            or_theta: None,
                        },
                    };
                    progress(id, n, r);
                    out
                })
                .collect();
            for &m in &config.methods {
                let ok: Vec<f64> = reps
                    .iter()
                    .filter_map(|r| r.ise.get(&m).and_then(|v| v.as_ref().ok()).map(|v| 100.0 * v))
                    .collect();
                let failures = reps.len() - ok.len();
                if failures as f64 > config.max_failure_fraction * reps.len() as f64 {
                    return Err(AdrfError::TooManyFailures {
                        failed: failures,
                        total: reps.len(),
                    });
                }
                let (mean, sd) = mean_sd(&ok);
                cells.push(CellSummary {
                    model: id,
                    n,
                    method: m,
                    mean,
                    sd,
                    successes: ok.len(),
                    failures,
                });
            }
            runs.insert((id, n), reps);
        }
    }
    Ok(BenchmarkReport {
        replications: config.replications,
        base_seed: config.base_seed,
        cells,
        runs,
    })
}

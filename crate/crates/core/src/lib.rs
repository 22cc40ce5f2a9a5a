//! Average dose-response functional estimation for functional treatments.
//!
//! A functional treatment `Z` (a curve on a grid) acts on a scalar outcome
//! `Y` in the presence of covariates `X`. Under the linear model
//! `E{Y*(z)} = a + <b, z>` this crate estimates `(a, b)` with four methods:
//! naive regression, functional stabilized weights, outcome regression and
//! a doubly robust combination, plus cross-validated tuning and a
//! simulation lab.

// `!(x > y)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod estimators;
pub mod fda;
pub mod fsw;
pub mod io;
pub mod scalar;
pub mod sieve;
pub mod simlab;
pub mod tuning;

pub use dataset::Dataset;
pub use error::{AdrfError, Result};
pub use estimators::{adrf_eval, ate, backfit, fit_dr, fit_fsw, fit_naive, fit_or, fit_or_strict, truncated_flr, AdrfFit, Method, TuningRecord};
pub use fda::{fpca, inner_product, mean_function, pc_scores, FpcaModel, FunctionalSample, Grid};
pub use fsw::{estimate_weights, RhoFamily, WeightFit, WeightModel};
pub use scalar::Real;
pub use io::{load_dataset, read_fit, write_dataset, write_fit, DatasetFiles};
pub use sieve::{sieve_design, standardize, CovariateBasis, SieveDesign, Standardizer};
pub use simlab::{generate, ise, run_benchmark, BenchmarkConfig, BenchmarkReport, ModelId, SimModel};
pub use tuning::{cv_loss_dr, cv_loss_fsw, cv_loss_or, select_tuning, BandwidthGrid, CvConfig, Folds, TuningResult};

pub type Grid64 = Grid<f64>;
pub type Curve64 = FunctionalSample<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Fpca64 = FpcaModel<f64>;
pub type WeightFit64 = WeightFit<f64>;
pub type AdrfFit64 = AdrfFit<f64>;

pub type Grid32 = Grid<f32>;
pub type Curve32 = FunctionalSample<f32>;
pub type Dataset32 = Dataset<f32>;
pub type Fpca32 = FpcaModel<f32>;
pub type WeightFit32 = WeightFit<f32>;
pub type AdrfFit32 = AdrfFit<f32>;

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{AdrfError, Result};
use crate::fda::{same_grid, FunctionalSample, Grid};
use crate::scalar::Real;

/// Observations `(X_i, Y_i, Z_i)`, `i = 1..n`, with curves on one grid.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    grid: Arc<Grid<T>>,
    curves: Vec<FunctionalSample<T>>,
    /// n x p
    covariates: DMatrix<T>,
    outcome: Vec<T>,
    covariate_names: Vec<String>,
    outcome_name: String,
}

impl<T: Real> Dataset<T> {
    pub fn new(curves: Vec<FunctionalSample<T>>, covariates: DMatrix<T>, outcome: Vec<T>) -> Result<Self> {
        let p = covariates.ncols();
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::with_names(curves, covariates, outcome, names, "y".into())
    }

    pub fn with_names(
        curves: Vec<FunctionalSample<T>>,
        covariates: DMatrix<T>,
        outcome: Vec<T>,
        covariate_names: Vec<String>,
        outcome_name: String,
    ) -> Result<Self> {
        let first = curves.first().ok_or(AdrfError::EmptyInput("dataset without observations"))?;
        let grid = Arc::clone(first.grid());
        if curves.iter().any(|c| !same_grid(&grid, c.grid())) {
            return Err(AdrfError::GridMismatch);
        }
        let n = curves.len();
        if covariates.nrows() != n {
            return Err(AdrfError::Alignment {
                expected: n,
                found: covariates.nrows(),
            });
        }
        if outcome.len() != n {
            return Err(AdrfError::Alignment {
                expected: n,
                found: outcome.len(),
            });
        }
        if covariates.ncols() == 0 {
            return Err(AdrfError::Data("at least one covariate is required".into()));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(AdrfError::Alignment {
                expected: covariates.ncols(),
                found: covariate_names.len(),
            });
        }
        if covariates.iter().any(|v| !v.is_finite()) || outcome.iter().any(|v| !v.is_finite()) {
            return Err(AdrfError::Data("non-finite covariate or outcome".into()));
        }
        Ok(Dataset {
            grid,
            curves,
            covariates,
            outcome,
            covariate_names,
            outcome_name,
        })
    }

    pub fn n(&self) -> usize {
        self.curves.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn curves(&self) -> &[FunctionalSample<T>] {
        &self.curves
    }

    pub fn covariates(&self) -> &DMatrix<T> {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> Vec<T> {
        self.covariates.row(i).iter().copied().collect()
    }

    pub fn outcome(&self) -> &[T] {
        &self.outcome
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// Column means of the covariate matrix.
    pub fn covariate_means(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.n());
        self.covariates
            .column_iter()
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b) / n)
            .collect()
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset<T> {
        let curves = idx.iter().map(|&i| self.curves[i].clone()).collect();
        let covariates = self.covariates.select_rows(idx);
        let outcome = idx.iter().map(|&i| self.outcome[i]).collect();
        Dataset {
            grid: Arc::clone(&self.grid),
            curves,
            covariates,
            outcome,
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Same data with a replaced outcome vector.
    pub fn with_outcome(&self, outcome: Vec<T>) -> Result<Dataset<T>> {
        if outcome.len() != self.n() {
            return Err(AdrfError::Alignment {
                expected: self.n(),
                found: outcome.len(),
            });
        }
        let mut out = self.clone();
        out.outcome = outcome;
        Ok(out)
    }
}

use thiserror::Error;

pub type Result<T, E = AdrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdrfError {
    #[error("curves are not evaluated on the same grid")]
    GridMismatch,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("covariate column {column} is constant")]
    DegenerateCovariate { column: usize },

    #[error("design column {column} is linearly dependent on the preceding columns")]
    Collinearity { column: usize },

    #[error("eigenvalue {index} is not positive (truncation exceeds numerical rank)")]
    Rank { index: usize },

    #[error("length mismatch: expected {expected} rows, found {found}")]
    Alignment { expected: usize, found: usize },

    #[error(
        "solver did not converge{}: gradient norm {grad_norm:e} after {iterations} iterations",
        .index.map(|i| format!(" at observation {i}")).unwrap_or_default()
    )]
    Convergence {
        index: Option<usize>,
        grad_norm: f64,
        iterations: usize,
    },

    #[error("backfitting did not stabilize after {iterations} iterations (last delta {delta:e})")]
    Backfitting { iterations: usize, delta: f64 },

    #[error("weight estimation failed at {failed} of {total} observations (first: {first})")]
    WeightFailures {
        failed: usize,
        total: usize,
        first: usize,
    },

    #[error("fold {fold} has {size} training rows, too few for a sieve of size {k}")]
    FoldSize { fold: usize, size: usize, k: usize },

    #[error("precondition violated: {0}")]
    Precondition(&'static str),

    #[error("every tuning candidate failed: {}", .0.join("; "))]
    AllCandidatesFailed(Vec<String>),

    #[error("{failed} of {total} replications failed, above the 5% budget")]
    TooManyFailures { failed: usize, total: usize },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("row count mismatch: {curves} curves but {rows} tabular rows")]
    RowMismatch { curves: usize, rows: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AdrfError {
    /// Stable, machine-parsable category label.
    pub fn category(&self) -> &'static str {
        match self {
            AdrfError::GridMismatch | AdrfError::InvalidGrid(_) => "grid",
            AdrfError::EmptyInput(_) => "empty-input",
            AdrfError::Parameter(_) => "parameter",
            AdrfError::Data(_) | AdrfError::DegenerateCovariate { .. } => "data",
            AdrfError::Collinearity { .. } => "collinearity",
            AdrfError::Rank { .. } => "rank",
            AdrfError::Alignment { .. } => "alignment",
            AdrfError::Convergence { .. }
            | AdrfError::Backfitting { .. }
            | AdrfError::WeightFailures { .. } => "convergence",
            AdrfError::FoldSize { .. } => "fold-size",
            AdrfError::Precondition(_) => "precondition",
            AdrfError::AllCandidatesFailed(_) | AdrfError::TooManyFailures { .. } => "aggregate",
            AdrfError::Parse { .. } => "parse",
            AdrfError::MissingColumn(_) | AdrfError::RowMismatch { .. } => "schema",
            AdrfError::Io(_) => "io",
        }
    }
}

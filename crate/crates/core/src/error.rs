use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("weight realization failed: {0}")]
    Realization(String),

    #[error("non-finite value of test function `{function}` in dataset `{dataset}`, row {row}")]
    NonFinite {
        dataset: String,
        row: usize,
        function: String,
    },

    #[error("unknown column `{column}` referenced by `{context}`")]
    UnknownColumn { column: String, context: String },

    #[error("test function `{name}`: {reason}")]
    TestFunction { name: String, reason: String },

    #[error(
        "pooled test-function covariance is near-singular (min eigenvalue {min_eigenvalue:.3e} \
         below threshold {threshold:.3e}); pass a ridge of at least {suggested_ridge:.3e} \
         or drop redundant test functions"
    )]
    NearSingularCovariance {
        min_eigenvalue: f64,
        threshold: f64,
        suggested_ridge: f64,
    },

    #[error("degrees of freedom: need at least as many test functions as datasets (L = {l}, K = {k})")]
    DegreesOfFreedom { l: usize, k: usize },

    #[error("moment design is singular; collinear datasets: {datasets:?}")]
    CollinearDatasets { datasets: Vec<String> },

    #[error("contrast matrix is rank deficient (rank {rank} < {rows} rows)")]
    RankDeficientContrast { rank: usize, rows: usize },

    #[error("inference requires a sum-to-one fit; simplex-constrained fits are not supported")]
    InferenceMode,

    #[error("level must lie strictly between 0 and 1, got {0}")]
    Level(f64),

    #[error("weighted Hessian is singular at the optimum")]
    SingularHessian,

    #[error(
        "perfect separation between source and target covariates; \
         set a positive regularization or rely on clipping"
    )]
    PerfectSeparation,

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid dimensions invalid: {0}")]
    BadDimensions(String),
    #[error("metric not positive definite at node ({i}, {j})")]
    NonPositiveDefiniteMetric { i: usize, j: usize },
    #[error("tensor rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("field grid {found:?} does not match operator grid {expected:?}")]
    GridMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("rank {0} too high for covariant derivative")]
    RankTooHigh(usize),
    #[error("solver failed to converge: {0}")]
    ConvergenceFailure(String),
    #[error("backend mismatch: {0}")]
    BackendMismatch(String),
    #[error("symbol normalizer degenerate: inf = {0:e}")]
    DegenerateSymbol(f64),
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),
    #[error("operation requires a bank normalized to sum to identity")]
    RequiresPartition,
    #[error("symbol has no heat-time profile")]
    NoTimeProfile,
    #[error("argument outside domain: {0}")]
    DomainError(String),
    #[error("field has kernel component of relative mass {0:e}")]
    KernelComponentPresent(f64),
    #[error("operation needs a full eigenbasis")]
    RequiresBasis,
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

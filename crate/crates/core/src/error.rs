use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Parameters or counts outside the support of the computation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Observed data that the model assigns zero probability.
    #[error("impossible data: {0}")]
    ImpossibleData(String),

    #[error("exact computation refused: n = {n} exceeds the cost guard of {limit}")]
    CostGuard { n: u64, limit: u64 },

    /// Fit is not identified (e.g. all-zero counts drive the rate to the boundary).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("model configuration error: {0}")]
    Config(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("routing error: {0}")]
    Routing(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

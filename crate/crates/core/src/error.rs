use thiserror::Error;

/// Errors produced by bag construction, fitting, aggregation and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {n} samples cannot form bags of minimum size {k}")]
    Infeasible { n: usize, k: usize },

    #[error("brute-force enumeration refused for n = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("singular design: condition estimate {condition:.3e}")]
    SingularDesign { condition: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("fit diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by a fit that failed to produce finite values.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::AtStep { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// True when bag sizes cannot be satisfied by the available samples.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::Infeasible { .. } => true,
            Error::AtStep { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

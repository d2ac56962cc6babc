use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular matrix: pivot {pivot} has magnitude {value:e}")]
    SingularMatrix { pivot: usize, value: f64 },

    #[error("invalid problem data: {0}")]
    InvalidData(String),

    #[error("parameter has dimension {found}, family expects {expected}")]
    BadParameterDimension { expected: usize, found: usize },

    #[error("non-finite iterate at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("iterates diverged at iteration {iteration} (|z| = {norm:e})")]
    Divergence { iteration: usize, norm: f64 },

    #[error("contraction factor estimation failed: {0}")]
    EstimationFailed(String),

    #[error("loss {loss:e} is too small to differentiate")]
    ZeroLossGradient { loss: f64 },

    #[error("nearest-neighbor store is empty")]
    EmptyStore,

    #[error("bad bound inputs: {0}")]
    BadInputs(String),

    #[error("corrupt model file: {0}")]
    CorruptModelFile(String),

    #[error("initial state violates state bounds at coordinate {index} ({value})")]
    InfeasibleStart { index: usize, value: f64 },

    #[error("training sample {index} failed: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

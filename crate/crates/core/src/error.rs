use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is numerically singular (pivot {pivot:.3e} at index {index})")]
    Singular { index: usize, pivot: f64 },

    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("power iteration did not converge within {iterations} iterations (last change {change:.3e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("sample-rate mismatch: expected {expected} Hz, found {found} Hz in {what}")]
    SampleRateMismatch {
        expected: u32,
        found: u32,
        what: String,
    },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("rank-deficient constraint set (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("bin {bin}, iteration {iteration}: {source}")]
    BinFailure {
        bin: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("silent reference signal")]
    SilentReference,

    #[error("target {target:.2} dB unreachable for gains in [{lo:e}, {hi:e}] (achievable {best:.2}..{worst:.2} dB)")]
    UnreachableTarget {
        target: f64,
        lo: f64,
        hi: f64,
        best: f64,
        worst: f64,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("tensor format: {0}")]
    Tensor(#[from] crate::tensor::TensorError),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

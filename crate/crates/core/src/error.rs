use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("sample size N={n} with split fraction {split} leaves an empty train or validation split")]
    SplitTooSmall { n: usize, split: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("mean weight matrix is singular (every task eigenvalue must be strictly positive): {0}")]
    SingularMeanWeight(String),

    #[error("effective rank r_{k} undefined: eigenvalue mu_{} is zero", k + 1)]
    UndefinedRank { k: usize, tail_rank: Option<f64> },

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("spectrum parse error at line {line}: {msg}")]
    SpectrumParse { line: usize, msg: String },

    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::NotPositiveDefinite(_))
    }
}

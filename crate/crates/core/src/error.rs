use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("point {re}+{im}i lies on or too close to the spectral support")]
    Domain { re: f64, im: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("gave up after {attempts} attempts: {what}")]
    RetryExhausted { attempts: usize, what: String },
    #[error("eigensolver failure: {0}")]
    Solver(String),
    #[error("numerically singular draw (condition {0:e})")]
    SingularDraw(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("Gram matrix is singular for q={q}, N={n}")]
    SingularGram { q: usize, n: usize },
    #[error("singular input: {0}")]
    SingularInput(String),
    #[error("trial skipped: {0}")]
    SkipTrial(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn domain(z: num_complex::Complex64) -> Self {
        LabError::Domain { re: z.re, im: z.im }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidArgument(msg.into())
    }
}

use thiserror::Error;

/// Errors raised by the preference-optimization library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("policy kind mismatch: {0}")]
    KindMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("condition {id} out of range (have {count})")]
    ConditionOutOfRange { id: usize, count: usize },

    #[error("motion is not in the support of this policy: {0}")]
    OutOfSupport(String),

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("preference record has no ranked group")]
    MissingGroup,

    #[error("Plackett-Luce weight at position {index} is not positive: {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tuple enumeration of {count} tuples exceeds the limit of {limit}")]
    TupleLimit { count: u128, limit: u128 },

    #[error("timestep {t} out of range for schedule with {t_max} steps")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit status for this error: 2 for configuration problems,
    /// 1 for everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

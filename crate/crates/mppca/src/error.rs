use thiserror::Error;

/// Errors produced by model fitting, monitoring, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty data set")]
    EmptyData,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("coordinate {0} is never observed; it cannot be estimated")]
    UnobservedCoordinate(usize),

    #[error("masked sample has no observed coordinates")]
    EmptyMask,

    #[error("zero-variance column '{0}'")]
    ZeroVarianceColumn(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("model file version {got} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("model file schema violation: {0}")]
    SchemaViolation(String),

    #[error("threshold solver failed to converge")]
    NonConvergence,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

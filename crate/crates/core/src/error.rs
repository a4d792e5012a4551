use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate fold: {0}")]
    DegenerateFold(String),

    #[error("non-finite value at row {row}: {what}")]
    NumericOverflow { row: usize, what: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) | Error::Io(_) => 3,
            Error::ContractViolation(_) | Error::DegenerateData(_) | Error::DegenerateLabels(_) => 3,
            Error::DegenerateFold(_) | Error::NumericOverflow { .. } | Error::Consistency(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

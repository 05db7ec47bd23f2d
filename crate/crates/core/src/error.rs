use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used for process exit codes and the C error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("dataset is empty after preprocessing")]
    EmptyDataset,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checksum mismatch or truncated file")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => ErrorCategory::Config,
            Error::Schema(_)
            | Error::MalformedRow { .. }
            | Error::EmptyDataset
            | Error::Shape(_)
            | Error::Checksum
            | Error::Version { .. }
            | Error::Format(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::NonFinite(_) | Error::UndefinedMetric(_) => ErrorCategory::Numeric,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

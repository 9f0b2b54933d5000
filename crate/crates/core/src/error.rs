use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or precondition violation.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {what} (expected {expected}, got {actual})")]
    Shape {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Operation called in the wrong order or against mismatched cached state.
    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_)
            | Error::Config(_)
            | Error::Shape { .. }
            | Error::Schema(_)
            | Error::State(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => 4,
        }
    }
}

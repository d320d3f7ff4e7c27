use thiserror::Error;

/// Crate-wide error type. Variants distinguish caller mistakes (shape and
/// usage errors) from data problems and numeric failures, so the CLI can map
/// them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {detail}")]
    CsvData {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training step aborted: {0}")]
    StepAborted(String),

    #[error("checkpoint format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

/// Error type shared by all cfbench modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent layer chains, shape mismatches, bad constants.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad or empty datasets, labels out of range.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed IDX/CSV input; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Non-finite values produced during a forward/backward pass.
    #[error("numerical error in layer {layer}: {msg}")]
    Numerical { layer: usize, msg: String },

    /// Manifest validation; collects every problem before any training starts.
    #[error("manifest validation failed:\n  - {}", .0.join("\n  - "))]
    Manifest(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside the mathematical domain of an operation (e.g. log of 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration; `key` names the offending setting.
    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// Input data is malformed or empty.
    #[error("data error: {0}")]
    Data(String),

    /// A metric cannot be computed on the given input.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFinite { step: usize, snapshot: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

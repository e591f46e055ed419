use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("config error on `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step} (task {task}): loss={loss}, reg_loss={reg_loss}")]
    NonFinite {
        step: usize,
        task: String,
        loss: f64,
        reg_loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

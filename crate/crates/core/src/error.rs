use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of a mathematical operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value failed validation. `field` names the offending key.
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("projection error: {0}")]
    Projection(String),

    #[error("render error: {0}")]
    Render(String),

    /// The remote guidance provider could not be reached.
    #[error("transport error: {0}")]
    Transport(String),

    /// A provider answered with something that violates the request/response contract.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A guidance provider failed mid-optimization. If a checkpoint could be
    /// written, `checkpoint` points at it.
    #[error("provider failed at iteration {iteration}: {source}")]
    ProviderFailed {
        iteration: usize,
        checkpoint: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

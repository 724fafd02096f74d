use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, plugin, strategy or experiment configuration.
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    /// Input tensors with the wrong shape or out-of-range labels.
    #[error("input error: {0}")]
    Input(String),

    /// A parameter selector named an id the model does not have.
    #[error("unknown parameter id `{0}`")]
    Selector(String),

    /// API misuse, e.g. attaching the same plugin kind twice.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// A locally kept parameter id showed up in a server message.
    #[error("privacy violation: local parameter `{id}` sent in round {round}")]
    Privacy { id: String, round: usize },

    #[error("malformed parameter container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

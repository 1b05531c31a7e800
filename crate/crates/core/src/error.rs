use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate cosine for layer `{0}`: zero-norm tensor")]
    DegenerateCosine(String),

    #[error("client {client_id} in round {round}: {source}")]
    Client {
        client_id: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { layer: layer.into(), detail: detail.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attaches client/round context.
    pub fn in_client(self, client_id: usize, round: usize) -> Self {
        Error::Client { client_id, round, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

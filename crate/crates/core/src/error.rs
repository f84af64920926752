use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: config fields, unknown ids, invalid hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/batch shape disagreements.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset files missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A partition could not satisfy the minimum-shard constraint.
    #[error("partition error: {0}")]
    Partition(String),

    /// Checkpoint or run-directory contents do not match their manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A simulated (or real) client failure surfaced to the server loop.
    #[error("client {client} failed in round {round}: {msg}")]
    ClientFailure {
        client: usize,
        round: usize,
        msg: String,
    },

    /// Server protocol violation: out-of-set cache update, arch mismatch.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Exit-code class for the CLI: 1 = validation, 2 = runtime.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Toml(_))
    }
}

use thiserror::Error;

/// Errors raised across the simulator, trainer and tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("joint {joint} position {value} outside [{min}, {max}]")]
    JointOutOfRange {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode already finished; call reset before stepping")]
    EpisodeDone,

    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("environment {index} failed: {source}")]
    Env {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("update aborted: non-finite loss")]
    NonFiniteLoss,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

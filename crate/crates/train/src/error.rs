use thiserror::Error;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] hiergen_models::ModelError),

    #[error(transparent)]
    Core(#[from] hiergen_core::CoreError),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("checkpoint format error: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "checkpoint was written for a different configuration (digest {found}, expected {expected}); \
         pass the override flag to load it anyway"
    )]
    DigestMismatch { expected: String, found: String },

    #[error("{stage} training diverged at epoch {epoch}: {what} is not finite")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        what: String,
    },
}

impl TrainError {
    pub fn config(msg: impl Into<String>) -> Self {
        TrainError::Config(msg.into())
    }
}

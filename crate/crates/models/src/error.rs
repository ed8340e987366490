use thiserror::Error;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] hiergen_core::CoreError),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("score {0} outside (0, 1)")]
    ScoreRange(f64),

    #[error("unknown block kind `{0}`")]
    UnknownBlock(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl ModelError {
    pub fn input(msg: impl Into<String>) -> Self {
        ModelError::Input(msg.into())
    }
}

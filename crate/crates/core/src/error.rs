use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid value at `{field_path}`: {reason}")]
    InvalidField { field_path: String, reason: String },

    #[error("index {index} out of range for layout of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("expected a nonempty list of {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f32),

    #[error("malformed run-length encoding: {0}")]
    Rle(String),

    #[error("caption does not parse: {0}")]
    Caption(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty text")]
    EmptyText,

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),

    #[error("image error: {0}")]
    Image(String),
}

impl CoreError {
    pub fn field(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::InvalidField {
            field_path: path.into(),
            reason: reason.into(),
        }
    }

    /// JSON-pointer-ish path of the offending field, when there is one.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            CoreError::InvalidField { field_path, .. } => Some(field_path),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Json(e.to_string())
    }
}

impl From<image::ImageError> for CoreError {
    fn from(e: image::ImageError) -> Self {
        CoreError::Image(e.to_string())
    }
}

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hiergen_core::CoreError;
use hiergen_train::TrainError;
use serde::{Deserialize, Serialize};

/// JSON error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_path: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn invalid(message: impl Into<String>, field_path: Option<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                code: "invalid_request".into(),
                message: message.into(),
                field_path,
            },
        }
    }

    pub fn not_loaded() -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            body: ErrorBody {
                code: "model_not_loaded".into(),
                message: "no model snapshot is loaded".into(),
                field_path: None,
            },
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                code: "internal".into(),
                message: message.into(),
                field_path: None,
            },
        }
    }

    /// Prefixes the field path, e.g. `boxes[0].x` becomes `layout.boxes[0].x`.
    pub fn under(mut self, prefix: &str) -> Self {
        self.body.field_path = Some(match self.body.field_path.take() {
            Some(p) if !p.is_empty() => format!("{prefix}.{p}"),
            _ => prefix.to_string(),
        });
        self
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let path = match &e {
            CoreError::EmptyText => Some("text".to_string()),
            other => other.field_path().map(str::to_string),
        };
        ApiError::invalid(e.to_string(), path)
    }
}

impl From<TrainError> for ApiError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Core(c) => c.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::warn!("{}: {}", self.body.code, self.body.message);
        }
        (self.status, Json(self.body)).into_response()
    }
}

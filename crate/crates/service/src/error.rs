use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use jokr_core::JokrError;
use serde::{Deserialize, Serialize};

/// Wire form of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn not_loaded() -> Self {
        Self::new(StatusCode::CONFLICT, "NotLoaded", "no checkpoint is loaded")
    }

    pub fn bad_image(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadImage", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<JokrError> for ApiError {
    fn from(e: JokrError) -> Self {
        let message = e.to_string();
        match e {
            JokrError::IndexOutOfRange { .. } | JokrError::CoordinateOutOfRange(_) => {
                Self::new(StatusCode::BAD_REQUEST, "BadOverride", message)
            }
            JokrError::Image(_) => Self::bad_image(message),
            JokrError::LengthMismatch(_) | JokrError::ShapeMismatch(_) | JokrError::InvalidConfig(_) => {
                Self::bad_request(message)
            }
            JokrError::CheckpointInvalid(_) | JokrError::ConfigMismatch(_) | JokrError::MissingInput(_) => {
                Self::new(StatusCode::BAD_REQUEST, "CheckpointInvalid", message)
            }
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

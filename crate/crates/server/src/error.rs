use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session loaded")]
    NoSession,
    #[error("no model loaded")]
    NoModel,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{message}")]
    Unprocessable { message: String, path: Option<String> },
    #[error("revision {expected} requested but cluster is at {current}")]
    PreconditionFailed { expected: u64, current: u64 },
    #[error("internal: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn unprocessable(message: impl Into<String>, path: Option<&str>) -> Self {
        ApiError::Unprocessable {
            message: message.into(),
            path: path.map(str::to_string),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NoSession | ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::PreconditionFailed { .. } => StatusCode::PRECONDITION_FAILED,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match &self {
            ApiError::Unprocessable { message, path } => json!({ "error": message, "path": path }),
            ApiError::PreconditionFailed { current, .. } => json!({ "error": self.to_string(), "revision": current }),
            other => json!({ "error": other.to_string() }),
        };
        (self.status(), Json(body)).into_response()
    }
}

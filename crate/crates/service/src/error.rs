use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pimap::Error;

#[derive(Debug, thiserror::Error)]
#[error("{status}: {message}")]
pub struct ServiceError {
    pub status: StatusCode,
    pub message: String,
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Unbound(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Usage(_) | Error::Validation(_) | Error::Decode(_) | Error::Version { .. } => StatusCode::BAD_REQUEST,
            Error::EncoderMismatch { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

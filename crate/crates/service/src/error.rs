use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("query text is empty")]
    EmptyText,
    #[error("k must be between 1 and {max}, got {k}")]
    KOutOfRange { k: i64, max: usize },
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("unknown model id `{0}`")]
    UnknownId(String),
    #[error("model id `{0}` has no stored point cloud")]
    NoPoints(String),
    #[error(
        "checkpoint model_version {checkpoint} does not match index model_version {index}; rebuild the index with this checkpoint"
    )]
    VersionMismatch { checkpoint: String, index: String },
    #[error(transparent)]
    Core(#[from] cadret_core::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::EmptyText | ServiceError::KOutOfRange { .. } | ServiceError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::UnknownId(_) | ServiceError::NoPoints(_) => StatusCode::NOT_FOUND,
            ServiceError::VersionMismatch { .. } | ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

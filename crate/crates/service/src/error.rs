use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::api::{ErrorBody, ErrorDetail};

/// Failure of one request, mapped to an HTTP status and a JSON error body.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    /// Schema violation; `field` names the offending request path.
    #[error("{message}")]
    BadRequest { field: Option<String>, message: String },

    /// Well-formed request whose parts do not fit together (e.g. horizon vs plan length).
    #[error("{message}")]
    Unprocessable { field: Option<String>, message: String },

    #[error("no model is loaded")]
    NoModel,

    #[error("not found")]
    NotFound,

    /// Internal failure; details go to the log under `id`, the client sees only the id.
    #[error("internal error {id}")]
    Internal { id: String },
}

impl ApiError {
    pub fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn unprocessable(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Unprocessable {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    /// Log `source` with a fresh correlation id and return the opaque error.
    pub fn internal(source: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        tracing::error!(%id, error = %source, "request failed");
        ApiError::Internal { id }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NotFound => StatusCode::NOT_FOUND,
            ApiError::Internal { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (code, field, id) = match self {
            ApiError::BadRequest { field, .. } => ("bad_request", field.clone(), None),
            ApiError::Unprocessable { field, .. } => ("unprocessable", field.clone(), None),
            ApiError::NoModel => ("no_model", None, None),
            ApiError::NotFound => ("not_found", None, None),
            ApiError::Internal { id } => ("internal", None, Some(id.clone())),
        };
        ErrorBody {
            error: ErrorDetail {
                code: code.into(),
                message: self.to_string(),
                field,
                id,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

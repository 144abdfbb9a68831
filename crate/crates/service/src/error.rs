use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no fit has completed for this session; POST /api/retrain first")]
    NoFitYet,

    #[error("a retrain job is already running (job {0})")]
    RetrainInProgress(u64),

    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("{what} {index} not found")]
    NotFound { what: &'static str, index: u64 },

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error(transparent)]
    Core(#[from] repkit_core::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NoFitYet | ApiError::RetrainInProgress(_) => StatusCode::CONFLICT,
            ApiError::LabelOutOfRange { .. } | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound { .. } => StatusCode::NOT_FOUND,
            ApiError::Core(repkit_core::Error::IndexOutOfRange { .. }) => StatusCode::NOT_FOUND,
            ApiError::Core(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NoFitYet => "no_fit_yet",
            ApiError::RetrainInProgress(_) => "retrain_in_progress",
            ApiError::LabelOutOfRange { .. } => "label_out_of_range",
            ApiError::NotFound { .. } => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Core(repkit_core::Error::IndexOutOfRange { .. }) => "not_found",
            ApiError::Core(_) => "solver_error",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

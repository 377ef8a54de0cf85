use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use daes_core::al_loop::LoopError;
use daes_core::api::ErrorBody;
use daes_core::config::ConfigError;
use serde_json::{json, Value};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }

    pub fn training() -> Self {
        Self::new(StatusCode::CONFLICT, "training", "the model is training; retry shortly")
            .with_detail(json!({ "retry_after_ms": 500 }))
    }

    pub fn finished() -> Self {
        Self::new(StatusCode::GONE, "finished", "the session has finished")
    }

    pub fn bad_body(err: impl std::fmt::Display, path: Option<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_body", err.to_string()).with_detail(json!({ "field": path }))
    }

    pub fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
    }
}

impl From<ConfigError> for ApiError {
    fn from(err: ConfigError) -> Self {
        let field = err.field().map(str::to_owned);
        Self::new(StatusCode::BAD_REQUEST, "invalid_config", err.to_string()).with_detail(json!({ "field": field }))
    }
}

impl From<LoopError> for ApiError {
    fn from(err: LoopError) -> Self {
        let message = err.to_string();
        match err {
            LoopError::StaleBatch { found } => Self::new(StatusCode::CONFLICT, "stale_batch", message)
                .with_detail(json!({ "batch_id": found })),
            LoopError::WrongPhase { .. } => Self::new(StatusCode::CONFLICT, "stale_batch", message),
            LoopError::PartialCoverage { missing } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "partial_coverage", message)
                    .with_detail(json!({ "missing": missing }))
            }
            LoopError::LabelOutOfRange { index, label, classes } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "label_out_of_range", message)
                    .with_detail(json!({ "index": index, "label": label, "classes": classes }))
            }
            LoopError::UnexpectedIndex(index) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unexpected_index", message)
                .with_detail(json!({ "index": index })),
            LoopError::Config(e) => e.into(),
            LoopError::InfeasibleSchedule { .. } | LoopError::InsufficientClass { .. } | LoopError::Data(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_config", message)
            }
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let retry = self.code == "training";
        let body = ErrorBody {
            code: self.code.to_owned(),
            message: self.message,
            detail: self.detail,
        };
        let mut response = (self.status, Json(body)).into_response();
        if retry {
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        response
    }
}

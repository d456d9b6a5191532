use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use csr_core::CsrError;
use serde::Serialize;

/// JSON error body `{code, message, field?}` with its status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Serialize)]
struct Body<'a> {
    code: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), field: None }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    pub fn sample_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "sample_not_found", format!("no sample with id {id:?}"))
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session with id {id:?}"))
    }

    pub fn model_not_loaded() -> Self {
        Self::new(StatusCode::CONFLICT, "model_not_loaded", "model artifacts are not loaded; train the pipeline first")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CsrError> for ApiError {
    fn from(e: CsrError) -> Self {
        let message = e.to_string();
        match e {
            CsrError::InvalidInteraction { field, .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_interaction", message).with_field(field)
            }
            CsrError::InvalidBox { field, index, .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_interaction", message)
                    .with_field(format!("{field}[{index}]"))
            }
            CsrError::UnknownPrototype { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_prototype", message).with_field("prototype_ids")
            }
            _ => Self::internal(message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r {
            JsonRejection::JsonSyntaxError(_) | JsonRejection::MissingJsonContentType(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body { code: self.code, message: &self.message, field: self.field.as_deref() };
        (self.status, Json(body)).into_response()
    }
}

use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::dataset::DataError;
use crate::engine::EngineError;
use crate::surrogate::SurrogateError;

/// Seconds a client should wait after a surrogate outage.
pub const RETRY_AFTER_SECS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                field: None,
            },
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn validation(field: Option<&str>, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message);
        e.body.field = field.map(str::to_string);
        e
    }

    pub fn upstream(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "upstream_error", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        }
        resp
    }
}

impl From<SurrogateError> for ApiError {
    fn from(e: SurrogateError) -> Self {
        ApiError::upstream(e.to_string())
    }
}

impl From<DataError> for ApiError {
    fn from(e: DataError) -> Self {
        let field = match &e {
            DataError::InvalidValue { feature, .. } => Some(feature.as_str()),
            DataError::UnknownFeature(f) | DataError::MissingValue(f) => Some(f.as_str()),
            _ => None,
        };
        ApiError::validation(field, e.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Surrogate(s) => s.into(),
            EngineError::Data(d) => d.into(),
            EngineError::AlreadyKnown(_) | EngineError::Inactive(_) => ApiError::conflict(e.to_string()),
            EngineError::NotCandidate(ref f) => {
                let f = f.clone();
                ApiError::validation(Some(&f), e.to_string())
            }
            EngineError::Belief(_) | EngineError::Invalid(_) | EngineError::BudgetTooLarge { .. } => {
                ApiError::validation(None, e.to_string())
            }
            EngineError::NoEvaluable => ApiError::upstream(e.to_string()),
        }
    }
}

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use riskwatch_core::dataset::DatasetError;
use riskwatch_core::pipeline::PipelineError;
use riskwatch_core::riskcore::RiskError;
use thiserror::Error;

use crate::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no model for skill {0:?}")]
    NoModelForSkill(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("episode {0} not found")]
    EpisodeNotFound(String),
    #[error("session {0} is paused awaiting a label for frame {1}")]
    SessionPaused(String, usize),
    #[error("session {0} is completed")]
    SessionCompleted(String),
    #[error("session {0} is not paused on frame {1}")]
    NotPaused(String, usize),
    #[error("frame index {index} out of range for {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("session {0} is a replay; frames come from the stored episode")]
    NotPushSource(String),
    #[error("a retrain is already running")]
    RetrainInProgress,
    #[error("no admissible training samples for any skill")]
    EmptyView,
    #[error("no route for {0}")]
    NoRoute(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NoModelForSkill(_) => "NoModelForSkill",
            ServiceError::SessionNotFound(_) => "SessionNotFound",
            ServiceError::EpisodeNotFound(_) => "EpisodeNotFound",
            ServiceError::SessionPaused(..) => "SessionPaused",
            ServiceError::SessionCompleted(_) => "SessionCompleted",
            ServiceError::NotPaused(..) => "NotPaused",
            ServiceError::IndexOutOfRange { .. } => "IndexOutOfRange",
            ServiceError::NotPushSource(_) => "NotPushSource",
            ServiceError::RetrainInProgress => "RetrainInProgress",
            ServiceError::EmptyView => "EmptyView",
            ServiceError::NoRoute(_) => "NoRoute",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Internal(_) => "Internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NoModelForSkill(_)
            | ServiceError::SessionNotFound(_)
            | ServiceError::EpisodeNotFound(_)
            | ServiceError::NoRoute(_) => StatusCode::NOT_FOUND,
            ServiceError::SessionPaused(..)
            | ServiceError::SessionCompleted(_)
            | ServiceError::NotPaused(..)
            | ServiceError::NotPushSource(_)
            | ServiceError::RetrainInProgress => StatusCode::CONFLICT,
            ServiceError::IndexOutOfRange { .. } | ServiceError::EmptyView => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<DatasetError> for ServiceError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::NotFound(id) => ServiceError::EpisodeNotFound(id),
            DatasetError::IndexOutOfRange { index, len } => ServiceError::IndexOutOfRange { index, len },
            DatasetError::EmptyView => ServiceError::EmptyView,
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<RiskError> for ServiceError {
    fn from(e: RiskError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "error": { "code": self.code(), "message": self.to_string() },
        });
        (self.status(), Json(body)).into_response()
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

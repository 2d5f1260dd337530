//! HTTP inference service.
//!
//! `POST /api/predict` (multipart image, `?top_k=`), `GET /api/labels` and
//! `GET /api/health` over a checkpoint loaded once at startup. Errors are
//! JSON `{"error": {"code", "message"}}` with a stable `code`.

mod http;
mod log;
mod model;

pub use http::{router, serve, AppState, ServerOptions, API_VERSION, API_VERSION_HEADER};
pub use log::JsonLog;
pub use model::{load_artifact, softmax, split_class_name, Label, Prediction, PredictionResult, ServingModel};

use axum::http::StatusCode;
use carid_core::backbones::ModelError;
use carid_core::trainer::TrainerError;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Artifact(#[from] TrainerError),
    #[error("cannot decode image: {0}")]
    UndecodableImage(String),
    #[error("top_k must be an integer between 1 and {num_classes}, got {top_k}")]
    TopKOutOfRange { top_k: usize, num_classes: usize },
    #[error("top_k must be an integer, got {0:?}")]
    InvalidTopK(String),
    #[error("upload exceeds the {limit_mb} MB limit")]
    PayloadTooLarge { limit_mb: u64 },
    #[error("no image in the multipart body (expected a field named \"image\")")]
    MissingImage,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServeError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServeError::UndecodableImage(_) | ServeError::MissingImage | ServeError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ServeError::TopKOutOfRange { .. } | ServeError::InvalidTopK(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::PayloadTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServeError::Artifact(_) | ServeError::Model(_) | ServeError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::Artifact(TrainerError::CorruptCheckpoint(_)) => "corrupt_checkpoint",
            ServeError::Artifact(TrainerError::VersionMismatch { .. }) => "version_mismatch",
            ServeError::Artifact(_) => "artifact_unavailable",
            ServeError::UndecodableImage(_) => "undecodable_image",
            ServeError::TopKOutOfRange { .. } => "top_k_out_of_range",
            ServeError::InvalidTopK(_) => "invalid_top_k",
            ServeError::PayloadTooLarge { .. } => "payload_too_large",
            ServeError::MissingImage => "missing_image",
            ServeError::BadRequest(_) => "bad_request",
            ServeError::Model(_) | ServeError::Internal(_) => "internal_error",
        }
    }
}

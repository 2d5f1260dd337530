use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use carid_core::config::ServeConfig;
use serde_json::{json, Map, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::log::JsonLog;
use crate::model::ServingModel;
use crate::ServeError;

/// Version of the JSON schemas, sent in [`API_VERSION_HEADER`].
pub const API_VERSION: &str = "1";
pub const API_VERSION_HEADER: &str = "x-carid-api-version";

/// Room for multipart boundaries and part headers on top of the image cap.
const MULTIPART_SLACK: u64 = 64 * 1024;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub max_upload_bytes: u64,
    /// Used when a request has no `top_k`; clipped to the class count.
    pub default_top_k: usize,
    /// `*` allows any origin.
    pub cors_origins: Vec<String>,
    pub access_log: Option<JsonLog>,
    pub audit_log: Option<PathBuf>,
}

impl ServerOptions {
    pub fn from_config(cfg: &ServeConfig) -> Self {
        Self {
            max_upload_bytes: cfg.max_upload_mb * 1024 * 1024,
            default_top_k: cfg.default_top_k,
            cors_origins: cfg.cors_origins.clone(),
            access_log: cfg.access_log.then(JsonLog::stdout),
            audit_log: cfg.audit_log.clone(),
        }
    }

    fn limit_mb(&self) -> u64 {
        self.max_upload_bytes.div_ceil(1024 * 1024)
    }
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self::from_config(&ServeConfig {
            access_log: false,
            ..ServeConfig::default()
        })
    }
}

/// Shared state. The model sits behind a readers-writer lock so a reload
/// swaps it atomically while in-flight requests finish on the old one.
#[derive(Debug)]
pub struct AppState {
    model: RwLock<Arc<ServingModel>>,
    options: ServerOptions,
    audit: Option<JsonLog>,
}

impl AppState {
    pub fn new(model: ServingModel, options: ServerOptions) -> std::io::Result<Self> {
        let audit = options.audit_log.as_deref().map(JsonLog::append_to).transpose()?;
        Ok(Self {
            model: RwLock::new(Arc::new(model)),
            options,
            audit,
        })
    }

    pub fn model(&self) -> Arc<ServingModel> {
        self.model.read().expect("model lock poisoned").clone()
    }

    /// Installs a new model and returns the previous one.
    pub fn swap_model(&self, model: ServingModel) -> Arc<ServingModel> {
        let mut guard = self.model.write().expect("model lock poisoned");
        std::mem::replace(&mut *guard, Arc::new(model))
    }

    pub fn options(&self) -> &ServerOptions {
        &self.options
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

fn parse_top_k(query: &HashMap<String, String>, model: &ServingModel, default: usize) -> Result<usize, ServeError> {
    let top_k = match query.get("top_k") {
        None => return Ok(default.clamp(1, model.num_classes())),
        Some(raw) => raw.trim().parse::<usize>().map_err(|_| ServeError::InvalidTopK(raw.clone()))?,
    };
    model.check_top_k(top_k)?;
    Ok(top_k)
}

fn multipart_error(e: axum::extract::multipart::MultipartError, st: &AppState) -> ServeError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ServeError::PayloadTooLarge {
            limit_mb: st.options.limit_mb(),
        }
    } else {
        ServeError::BadRequest(e.body_text())
    }
}

async fn predict(
    State(st): State<Arc<AppState>>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<Value>, ServeError> {
    let start = Instant::now();
    let model = st.model();
    let Query(query) = query.map_err(|e| ServeError::BadRequest(e.body_text()))?;
    let top_k = parse_top_k(&query, &model, st.options.default_top_k)?;
    let mut multipart = multipart.map_err(|e| ServeError::BadRequest(e.body_text()))?;

    let mut image = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| multipart_error(e, &st))? {
        let wanted = field.name() == Some("image") || (image.is_none() && field.file_name().is_some());
        let bytes = field.bytes().await.map_err(|e| multipart_error(e, &st))?;
        if wanted {
            image = Some(bytes);
        }
    }
    let bytes = image.ok_or(ServeError::MissingImage)?;
    if bytes.len() as u64 > st.options.max_upload_bytes {
        return Err(ServeError::PayloadTooLarge {
            limit_mb: st.options.limit_mb(),
        });
    }

    let worker_model = model.clone();
    let worker_bytes = bytes.clone();
    let mut result = tokio::task::spawn_blocking(move || worker_model.predict(&worker_bytes, top_k))
        .await
        .map_err(|e| ServeError::Internal(e.to_string()))??;
    result.latency_ms = start.elapsed().as_secs_f64() * 1e3;

    if let Some(audit) = &st.audit {
        let top = &result.predictions[0];
        let mut rec = Map::new();
        rec.insert("event".into(), "prediction".into());
        rec.insert("image_crc32".into(), format!("{:08x}", crc32fast::hash(&bytes)).into());
        rec.insert("image_bytes".into(), bytes.len().into());
        rec.insert("class_name".into(), top.class_name.clone().into());
        rec.insert("confidence".into(), top.confidence.into());
        rec.insert("model_version".into(), model.model_version().into());
        audit.write(rec);
    }
    Ok(Json(serde_json::to_value(result).map_err(|e| ServeError::Internal(e.to_string()))?))
}

async fn labels(State(st): State<Arc<AppState>>) -> Json<Value> {
    let model = st.model();
    Json(json!({
        "count": model.num_classes(),
        "model_version": model.model_version(),
        "labels": model.labels(),
    }))
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let model = st.model();
    Json(json!({
        "status": "ok",
        "model_version": model.model_version(),
        "num_classes": model.num_classes(),
    }))
}

/// Rejects oversized uploads from their declared length before any body is
/// read, stamps the API version and writes the access log.
async fn envelope(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let start = Instant::now();
    let method = req.method().clone();
    let path = req.uri().path().to_owned();
    let declared = req
        .headers()
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let too_large = declared.is_some_and(|n| n > st.options.max_upload_bytes + MULTIPART_SLACK);
    let mut resp = if too_large {
        ServeError::PayloadTooLarge {
            limit_mb: st.options.limit_mb(),
        }
        .into_response()
    } else {
        next.run(req).await
    };
    resp.headers_mut()
        .insert(API_VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    if let Some(log) = &st.options.access_log {
        let mut rec = Map::new();
        rec.insert("method".into(), method.as_str().into());
        rec.insert("path".into(), path.into());
        rec.insert("status".into(), resp.status().as_u16().into());
        rec.insert("latency_ms".into(), (start.elapsed().as_secs_f64() * 1e3).into());
        if let Some(n) = declared {
            rec.insert("request_bytes".into(), n.into());
        }
        log.write(rec);
    }
    resp
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers(Any);
    if origins.is_empty() || origins.iter().any(|o| o == "*") {
        layer.allow_origin(Any)
    } else {
        let list: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        layer.allow_origin(AllowOrigin::list(list))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = (state.options.max_upload_bytes + MULTIPART_SLACK) as usize;
    Router::new()
        .route("/api/predict", post(predict))
        .route("/api/labels", get(labels))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(middleware::from_fn_with_state(state.clone(), envelope))
        .layer(cors(&state.options.cors_origins))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

//! HTTP endpoints over the currently loaded posterior.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use recovery_core::data::classes;
use serde_json::json;

use crate::api::{predict, ApiError, FieldError, PredictionRequest};
use crate::posterior::{LoadedPosterior, PosteriorError};

/// Shared server state. Handlers clone the current `Arc` and work on that
/// snapshot, so a reload never changes a request in flight.
#[derive(Debug, Default)]
pub struct AppState {
    current: RwLock<Option<Arc<LoadedPosterior>>>,
    source: Option<PathBuf>,
}

impl AppState {
    pub fn new(source: Option<PathBuf>) -> Self {
        Self { current: RwLock::new(None), source }
    }

    pub fn current(&self) -> Option<Arc<LoadedPosterior>> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Replaces the posterior; returns the previous one.
    pub fn swap(&self, next: Option<LoadedPosterior>) -> Option<Arc<LoadedPosterior>> {
        let next = next.map(Arc::new);
        std::mem::replace(&mut *self.current.write().unwrap_or_else(|e| e.into_inner()), next)
    }

    /// Loads from the configured directory. On failure the old posterior
    /// stays in place.
    pub fn reload(&self) -> Result<Option<String>, PosteriorError> {
        let Some(dir) = &self.source else { return Ok(None) };
        let p = LoadedPosterior::load(dir)?;
        let id = p.report.fit_id.clone();
        self.swap(Some(p));
        Ok(Some(id))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classes", get(list_classes))
        .route("/predict", post(predict_handler))
        .route("/reload", post(reload))
        .with_state(state)
}

fn field_errors(errors: Vec<FieldError>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "errors": errors }))).into_response()
}

fn no_posterior() -> Response {
    (StatusCode::CONFLICT, Json(json!({ "error": "no posterior is loaded" }))).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let body = match state.current() {
        Some(p) => json!({ "status": "ok", "fit_id": p.report.fit_id, "max_rhat": p.report.max_rhat }),
        None => json!({ "status": "ok", "fit_id": null, "max_rhat": null }),
    };
    Json(body).into_response()
}

async fn list_classes() -> Response {
    Json(classes()).into_response()
}

async fn predict_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(posterior) = state.current() else { return no_posterior() };
    let req: PredictionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return field_errors(vec![FieldError { field: "body".into(), message: e.to_string() }]),
    };
    let result = tokio::task::spawn_blocking(move || predict(&posterior, &req)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(ApiError::Invalid(errors))) => field_errors(errors),
        Ok(Err(ApiError::Internal(msg))) => {
            (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": msg }))).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response(),
    }
}

async fn reload(State(state): State<Arc<AppState>>) -> Response {
    let s = state.clone();
    match tokio::task::spawn_blocking(move || s.reload()).await {
        Ok(Ok(Some(id))) => Json(json!({ "fit_id": id })).into_response(),
        Ok(Ok(None)) => (StatusCode::BAD_REQUEST, Json(json!({ "error": "server was started without --posterior" })))
            .into_response(),
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response(),
    }
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

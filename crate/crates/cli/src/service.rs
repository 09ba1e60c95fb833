//! HTTP redaction service: `POST /mask`, `GET /health`.
//!
//! Stateless. Request text and detected values are never logged; only
//! labels, spans and latency are.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use piimask::apply_detector_as_masker;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;

#[derive(Debug, Deserialize)]
pub struct MaskRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityOut {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub masked_text: String,
    pub entities: Vec<EntityOut>,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub backend: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn mask(State(backend): State<Arc<Backend>>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: MaskRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    if req.text.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "text must not be empty");
    }
    let result = tokio::task::spawn_blocking(move || apply_detector_as_masker(&req.text, backend.as_ref())).await;
    let outcome = match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => {
            tracing::error!(error = %e, "masking backend failed");
            return error(StatusCode::BAD_GATEWAY, e.to_string());
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let latency = started.elapsed().as_secs_f64();
    let entities: Vec<EntityOut> = outcome
        .entities
        .iter()
        .map(|e| EntityOut {
            label: e.label.as_str().to_string(),
            start: e.span.start(),
            end: e.span.end(),
        })
        .collect();
    let spans: Vec<String> = entities.iter().map(|e| format!("{}[{},{})", e.label, e.start, e.end)).collect();
    tracing::info!(entities = entities.len(), spans = ?spans, latency_seconds = latency, "masked request");
    Json(MaskResponse {
        masked_text: outcome.masked.into_string(),
        entities,
        latency_seconds: latency,
    })
    .into_response()
}

async fn health(State(backend): State<Arc<Backend>>) -> Response {
    let name = backend.name().to_string();
    let healthy = tokio::task::spawn_blocking(move || backend.healthy()).await.unwrap_or(false);
    let (code, status) = if healthy {
        (StatusCode::OK, "ok")
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, "unhealthy")
    };
    (
        code,
        Json(HealthResponse {
            status: status.to_string(),
            backend: name,
        }),
    )
        .into_response()
}

pub fn router(backend: Arc<Backend>) -> Router {
    Router::new()
        .route("/mask", post(mask))
        .route("/health", get(health))
        .with_state(backend)
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    addr: SocketAddr,
    backend: Arc<Backend>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, backend, shutdown).await
}

/// Serves on an already bound listener. The backend must pass its health
/// check first.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    backend: Arc<Backend>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let result = run(listener, backend.clone(), shutdown).await;
    // A blocking HTTP client may not be dropped on an async worker.
    let _ = tokio::task::spawn_blocking(move || drop(backend)).await;
    result
}

async fn run(
    listener: tokio::net::TcpListener,
    backend: Arc<Backend>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let probe = backend.clone();
    if !tokio::task::spawn_blocking(move || probe.healthy()).await? {
        anyhow::bail!("{} backend failed its startup health check", backend.name());
    }
    tracing::info!(addr = %listener.local_addr()?, backend = backend.name(), "serving");
    axum::serve(listener, router(backend))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

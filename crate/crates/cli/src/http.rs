//! HTTP+JSON front end for [`SessionManager`].
//!
//! | method | path                      | body                             |
//! |--------|---------------------------|----------------------------------|
//! | POST   | `/sessions`               | `{kb, domain?, checkpoint?, seed?}` |
//! | POST   | `/sessions/{id}/messages` | `{text}`                         |
//! | GET    | `/sessions/{id}`          |                                  |
//! | DELETE | `/sessions/{id}`          |                                  |
//! | GET    | `/healthz`                |                                  |
//!
//! Errors are `{error, detail}` with a 400, 404, 409 or 500 status.

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kvret_core::corpus::Domain;
use kvret_core::server::{infer_domain, parse_kb, ServerError, SessionManager};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use std::sync::Arc;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub type AppState = Arc<SessionManager>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code, detail: detail.into() }
    }
}

impl From<ServerError> for ApiError {
    fn from(e: ServerError) -> Self {
        let (status, code) = match &e {
            ServerError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            ServerError::CheckpointNotFound(_) => (StatusCode::NOT_FOUND, "checkpoint_not_found"),
            ServerError::InvalidKb(_) => (StatusCode::BAD_REQUEST, "invalid_kb"),
            ServerError::EmptyMessage => (StatusCode::BAD_REQUEST, "empty_message"),
            ServerError::Busy(_) => (StatusCode::CONFLICT, "session_busy"),
            ServerError::Model(_) => (StatusCode::INTERNAL_SERVER_ERROR, "model_error"),
        };
        Self { status, code, detail: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

#[derive(Deserialize)]
struct CreateSession {
    #[serde(default)]
    kb: Value,
    domain: Option<Domain>,
    checkpoint: Option<String>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct PostMessage {
    text: String,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let kb = parse_kb(&req.kb)?;
    let domain = match req.domain.or_else(|| infer_domain(&kb)) {
        Some(d) => d,
        None => return Err(ApiError::bad_request("invalid_kb", "domain not given and not recognizable from the KB columns")),
    };
    let id = state.create_session(kb, domain, req.checkpoint.as_deref(), req.seed)?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

async fn post_message(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: PostMessage = parse_body(&body)?;
    let reply = tokio::task::spawn_blocking(move || state.respond(&id, &req.text))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", detail: e.to_string() })??;
    Ok(Json(serde_json::to_value(reply).expect("reply serializes")))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(serde_json::to_value(state.view(&id)?).expect("view serializes")))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "sessions": state.session_count()}))
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", detail: "no such route".into() }
}

/// CORS for the given origins, or for any origin when the list is empty.
pub fn cors(origins: &[String]) -> anyhow::Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods([Method::GET, Method::POST, Method::DELETE]).allow_headers(Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let values = origins.iter().map(|o| HeaderValue::from_str(o)).collect::<Result<Vec<_>, _>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(values)))
}

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .fallback(not_found)
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: AppState, cors: CorsLayer, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

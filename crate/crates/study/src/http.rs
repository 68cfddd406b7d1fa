//! JSON API and static file serving for the study.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::model::{Side, StudyError};
use crate::service::Study;

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Required for `/api/results`; when unset the endpoint is disabled.
    pub operator_token: Option<String>,
    /// Directory holding the browser client, served at `/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone)]
struct AppState {
    study: Arc<Study>,
    operator_token: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let (status, kind) = match &e {
            StudyError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            StudyError::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        Self::new(status, kind, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

#[derive(Deserialize)]
struct SessionQuery {
    session: String,
}

#[derive(Deserialize)]
struct VoteBody {
    session: String,
    item_id: String,
    choice: Side,
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn new_session(State(s): State<AppState>) -> ApiResult {
    Ok(Json(s.study.new_session()?).into_response())
}

async fn next_item(State(s): State<AppState>, q: Result<Query<SessionQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    Ok(Json(s.study.next_item(&q.session)?).into_response())
}

async fn vote(State(s): State<AppState>, body: Result<Json<VoteBody>, JsonRejection>) -> ApiResult {
    let Json(v) = body?;
    let study = Arc::clone(&s.study);
    // Appends touch the disk; keep them off the async workers.
    let ack = tokio::task::spawn_blocking(move || study.record_vote(&v.session, &v.item_id, v.choice))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(ack).into_response())
}

async fn results(State(s): State<AppState>, headers: HeaderMap, q: Query<TokenQuery>) -> ApiResult {
    let offered = headers
        .get("x-operator-token")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or_else(|| q.0.token.clone());
    match (&s.operator_token, offered) {
        (Some(want), Some(got)) if *want == got => Ok(Json(s.study.results()).into_response()),
        _ => Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "operator token required")),
    }
}

async fn crop_png(State(s): State<AppState>, Path((item_id, file)): Path<(String, String)>) -> ApiResult {
    let side = match file.as_str() {
        "left.png" => Side::Left,
        "right.png" => Side::Right,
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such crop")),
    };
    let path = s.study.item(&item_id)?.png_on(side).to_path_buf();
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(e) => {
            log::error!("{}: {e}", path.display());
            Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", "crop image unavailable"))
        }
    }
}

pub fn router(study: Arc<Study>, opts: ServeOptions) -> Router {
    let state = AppState {
        study,
        operator_token: opts.operator_token,
    };
    let api = Router::new()
        .route("/api/session", post(new_session))
        .route("/api/items/next", get(next_item))
        .route("/api/vote", post(vote))
        .route("/api/results", get(results))
        .route("/crops/{item_id}/{file}", get(crop_png))
        .with_state(state);
    match opts.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, study: Arc<Study>, opts: ServeOptions) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("study listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(study, opts))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

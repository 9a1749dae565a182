//! HTTP surface over the query engine.
//!
//! Every route except `/health` and `/vocab` requires an `x-user-id` header;
//! that identity is what the audit log records. Bodies are JSON and every
//! response carries `x-api-version`. Errors are
//! `{"error": {"code": ..., "message": ...}}` and never name a note id.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use notesearch_core::ann::IndexError;
use notesearch_core::embedding::EmbedError;
use notesearch_core::query::{Allowlist, CohortAction, Engine, QueryError, SearchRequest, SearchResponse};
use notesearch_core::NoteId;
use serde::Deserialize;
use serde_json::{json, Value};

pub const API_VERSION: &str = "1";
pub const USER_HEADER: &str = "x-user-id";
pub const VERSION_HEADER: &str = "x-api-version";

pub struct AppState {
    pub engine: Engine,
    pub allowlist: Allowlist,
    /// Research project this deployment serves; reported by `/health`.
    pub project: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        use StatusCode as S;
        let msg = e.to_string();
        match e {
            QueryError::InvalidRequest(_) => Self::new(S::BAD_REQUEST, "invalid_request", msg),
            QueryError::Filter(_) => Self::new(S::BAD_REQUEST, "invalid_filter", msg),
            QueryError::MissingCursor | QueryError::InvalidCursor => Self::new(S::BAD_REQUEST, "invalid_cursor", msg),
            QueryError::StaleCursor => Self::new(S::CONFLICT, "stale_cursor", msg),
            QueryError::UnknownWorkspace(_) => Self::new(S::NOT_FOUND, "unknown_workspace", msg),
            QueryError::Forbidden => Self::new(S::FORBIDDEN, "forbidden", msg),
            QueryError::NotFound => Self::new(S::NOT_FOUND, "not_found", msg),
            QueryError::Index(IndexError::Untrained) => Self::new(S::SERVICE_UNAVAILABLE, "index_unavailable", msg),
            QueryError::Index(IndexError::InvalidK) => Self::new(S::BAD_REQUEST, "invalid_request", msg),
            QueryError::Embed(ref err) if err.is_retriable() => Self::new(S::SERVICE_UNAVAILABLE, "embedder_unavailable", msg),
            QueryError::Embed(EmbedError::EmptyInput) => Self::new(S::BAD_REQUEST, "invalid_request", msg),
            QueryError::Embed(_) => Self::new(S::BAD_GATEWAY, "embedder_failed", msg),
            // internal detail may mention record ids, so it stays in the server log
            other => {
                tracing::error!(error = %other, "request failed");
                Self::new(S::INTERNAL_SERVER_ERROR, "internal", "internal error")
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn user(headers: &HeaderMap) -> ApiResult<String> {
    let id = headers
        .get(USER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty() && s.len() <= 256)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", format!("missing {USER_HEADER} header")))?;
    Ok(id.to_string())
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error"))?
}

#[derive(Debug, Deserialize)]
struct SearchBody {
    #[serde(flatten)]
    request: SearchRequest,
    /// Present for "search more": the cursor from the previous page.
    #[serde(default)]
    cursor: Option<String>,
}

async fn search(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<SearchResponse>> {
    let user = user(&headers)?;
    let body: SearchBody = parse_json(&body)?;
    blocking(move || {
        let resp = match &body.cursor {
            None => state.engine.execute_search(&body.request, &user, &state.allowlist),
            Some(c) => state.engine.search_more(&body.request, Some(c), &user, &state.allowlist),
        };
        Ok(Json(resp?))
    })
    .await
}

async fn note(State(state): State<Arc<AppState>>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    let user = user(&headers)?;
    let id: u64 = id.parse().map_err(|_| ApiError::bad_request("note id must be a non-negative integer"))?;
    blocking(move || Ok(Json(state.engine.fetch_note(NoteId(id), &user, &state.allowlist)?).into_response())).await
}

async fn vocab(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(serde_json::to_value(state.engine.vocabulary()).expect("vocabulary serializes")))).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let index = state.engine.index();
    Json(json!({
        "status": "ok",
        "project": state.project,
        "trained": index.is_trained(),
        "vectors": index.len(),
        "generation": index.generation(),
        "allowlist_enforced": state.allowlist.is_enforced(),
    }))
}

async fn cohort_get(State(state): State<Arc<AppState>>, headers: HeaderMap, Path(ws): Path<String>) -> ApiResult<Response> {
    user(&headers)?;
    let w = state.engine.cohorts().get(&ws).ok_or(QueryError::UnknownWorkspace(ws))?;
    Ok(Json(w).into_response())
}

async fn cohort_create(State(state): State<Arc<AppState>>, headers: HeaderMap, Path(ws): Path<String>) -> ApiResult<Response> {
    let who = user(&headers)?;
    let w = blocking(move || Ok(state.engine.cohorts().create(&ws)?)).await?;
    tracing::info!(user = %who, workspace = %w.workspace_id, "cohort workspace created");
    Ok(Json(w).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortBody {
    mrns: Vec<String>,
}

async fn cohort_update(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path((ws, action)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let who = user(&headers)?;
    let action: CohortAction = action.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "not_found", e))?;
    let body: CohortBody = parse_json(&body)?;
    if body.mrns.iter().any(|m| m.trim().is_empty()) {
        return Err(ApiError::bad_request("mrns must be non-empty strings"));
    }
    let w = blocking(move || {
        let cohorts = state.engine.cohorts();
        let mut current = cohorts.get(&ws).ok_or_else(|| QueryError::UnknownWorkspace(ws.clone()))?;
        for mrn in &body.mrns {
            current = cohorts.update(&ws, action, mrn.trim())?;
        }
        Ok(current)
    })
    .await?;
    tracing::info!(user = %who, workspace = %w.workspace_id, ?action, "cohort workspace updated");
    Ok(Json(w).into_response())
}

async fn cohort_export(State(state): State<Arc<AppState>>, headers: HeaderMap, Path(ws): Path<String>) -> ApiResult<Response> {
    user(&headers)?;
    let w = state.engine.cohorts().get(&ws).ok_or(QueryError::UnknownWorkspace(ws))?;
    let mut text = w.export().join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    let disposition = format!("attachment; filename=\"{}-mrns.txt\"", w.workspace_id);
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8")),
            (header::CONTENT_DISPOSITION, HeaderValue::from_str(&disposition).expect("workspace ids are header-safe")),
        ],
        text,
    )
        .into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn stamp_version(mut resp: Response) -> Response {
    resp.headers_mut().insert(VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    resp
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/search", post(search))
        .route("/notes/{id}", get(note))
        .route("/vocab", get(vocab))
        .route("/cohort/{ws}", get(cohort_get).put(cohort_create))
        .route("/cohort/{ws}/export", get(cohort_export))
        .route("/cohort/{ws}/{action}", post(cohort_update))
        .fallback(not_found)
        .layer(axum::middleware::map_response(stamp_version))
        .with_state(state)
}

/// Serves until ctrl-c, then stops accepting and drains in-flight requests.
pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
}

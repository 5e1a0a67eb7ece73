//! HTTP front end over the annotation store of a run directory.
//!
//! Routes:
//!
//! | Method | Path | Body / query | Response |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSession`] | [`SessionListing`] (201) |
//! | GET | `/sessions` | | `[SessionListing]` |
//! | GET | `/sessions/{id}` | | [`AnnotationSession`] |
//! | GET | `/sessions/{id}/next` | `?annotator=` | [`NextItem`] |
//! | POST | `/sessions/{id}/labels` | [`SubmitLabel`] | [`LabelAck`] |
//! | GET | `/sessions/{id}/summary` | | [`SessionSummary`] |
//! | GET | `/healthz` | | `{"status": "ok", "sessions": n}` |
//!
//! Errors are `{"code": ..., "message": ...}` with a matching status. Every
//! write goes through one mutex-guarded store, and a label is acknowledged
//! only after it has been synced to the log.

use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use defmine::annotation::{
    read_sample_items, AnnotationError, AnnotationSession, AnnotationStore, LabelAck, NextItem,
    SampleItem, SessionListing, SessionSummary,
};
use defmine::corpus::{RelationId, TripleKey};
use defmine::pipeline::{
    definition_context, read_registrations, sample_file_name, ANNOTATIONS_DIR,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] AnnotationError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the service keeps its state and, optionally, the built UI.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub run_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<AnnotationStore>>,
    run_dir: Arc<PathBuf>,
}

impl AppState {
    /// Opens (and replays) the store under `run_dir/annotations`.
    pub fn open(run_dir: &Path) -> Result<Self, ServiceError> {
        let store = AnnotationStore::open(run_dir.join(ANNOTATIONS_DIR))?;
        Ok(AppState {
            store: Arc::new(Mutex::new(store)),
            run_dir: Arc::new(run_dir.to_path_buf()),
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub relation: RelationId,
    pub scorer_id: String,
    /// Inline sample; takes precedence over `sample_file`.
    #[serde(default)]
    pub items: Option<Vec<SampleItem>>,
    /// Sample file, relative paths resolved against the run directory.
    /// Defaults to the sampling stage's file for this relation and scorer.
    #[serde(default)]
    pub sample_file: Option<PathBuf>,
    /// Defaults to the count registered by the sampling stage, else the sample size.
    #[serde(default)]
    pub qualified_count: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitLabel {
    pub triple_key: TripleKey,
    pub annotator_id: String,
    pub valid: bool,
    pub novel: bool,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.message);
        }
        (
            self.status,
            Json(json!({"code": self.code, "message": self.message})),
        )
            .into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let (status, code) = match &e {
            AnnotationError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            AnnotationError::EmptySample => (StatusCode::UNPROCESSABLE_ENTITY, "empty_sample"),
            AnnotationError::DuplicateTriple(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "duplicate_triple")
            }
            AnnotationError::ForeignTriple(..) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "foreign_triple")
            }
            AnnotationError::CellMismatch(..) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "cell_mismatch")
            }
            AnnotationError::EmptyAnnotator => (StatusCode::BAD_REQUEST, "missing_annotator"),
            AnnotationError::Io { .. } | AnnotationError::Corrupt { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "storage_error")
            }
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs `f` against the store on the blocking pool, since writes sync to disk.
async fn with_store<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut AnnotationStore, &Path) -> Result<T, ApiError> + Send + 'static,
{
    let store = state.store.clone();
    let run_dir = state.run_dir.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = store.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard, &run_dir)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/summary", get(summary))
        .with_state(state);
    match static_dir.filter(|d| d.is_dir()) {
        Some(dir) => {
            api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => api.fallback(no_route),
    }
}

async fn no_route(uri: axum::http::Uri) -> ApiError {
    if uri.path() == "/" {
        return ApiError::new(
            StatusCode::NOT_FOUND,
            "ui_not_built",
            "no annotation UI is being served",
        );
    }
    ApiError::new(
        StatusCode::NOT_FOUND,
        "not_found",
        format!("no route for {}", uri.path()),
    )
}

async fn healthz(State(state): State<AppState>) -> ApiResult<serde_json::Value> {
    let n = with_store(&state, |s, _| Ok(s.sessions().len())).await?;
    Ok(Json(json!({"status": "ok", "sessions": n})))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Vec<SessionListing>> {
    with_store(&state, |s, _| Ok(s.sessions())).await.map(Json)
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<AnnotationSession> {
    with_store(&state, move |s, _| Ok(s.session(&id)?.clone()))
        .await
        .map(Json)
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionListing>), ApiError> {
    let Json(req) = body?;
    let listing = with_store(&state, move |store, run_dir| {
        let items = match req.items {
            Some(items) => items,
            None => {
                let file = req.sample_file.map(|p| run_dir.join(p)).unwrap_or_else(|| {
                    run_dir
                        .join("sample")
                        .join(sample_file_name(&req.scorer_id, req.relation))
                });
                load_sample(&file)?
            }
        };
        let qualified = req.qualified_count.unwrap_or_else(|| {
            read_registrations(run_dir)
                .ok()
                .and_then(|regs| {
                    regs.into_iter()
                        .find(|r| r.relation == req.relation && r.scorer_id == req.scorer_id)
                })
                .map_or(items.len(), |r| r.qualified_count)
        });
        let context = definition_context(run_dir)
            .inspect_err(|e| log::warn!("no definition context: {e}"))
            .ok();
        let id = store.create_session(
            items,
            req.relation,
            &req.scorer_id,
            qualified,
            context.as_ref(),
        )?;
        let s = store.session(&id)?;
        Ok(SessionListing {
            session_id: id.clone(),
            relation: s.relation,
            scorer_id: s.scorer_id.clone(),
            size: s.items.len(),
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(listing)))
}

fn load_sample(path: &Path) -> Result<Vec<SampleItem>, ApiError> {
    let file = std::fs::File::open(path).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_sample",
            format!("{}: {e}", path.display()),
        )
    })?;
    read_sample_items(file).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_sample",
            format!("{}: {e}", path.display()),
        )
    })
}

async fn next_item(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<NextItem> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "missing_annotator",
                "query parameter `annotator` is required",
            )
        })?;
    with_store(&state, move |s, _| Ok(s.next_unlabeled(&id, &annotator)?))
        .await
        .map(Json)
}

async fn submit_label(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SubmitLabel>, JsonRejection>,
) -> ApiResult<LabelAck> {
    let Json(req) = body?;
    with_store(&state, move |s, _| {
        Ok(s.submit_label(&id, req.triple_key, &req.annotator_id, req.valid, req.novel)?)
    })
    .await
    .map(Json)
}

async fn summary(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<SessionSummary> {
    with_store(&state, move |s, _| Ok(s.session_summary(&id)?))
        .await
        .map(Json)
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve<F>(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: F,
) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr`, reports the bound address through `on_ready`, and serves
/// until interrupted.
pub fn run_blocking(
    config: &ServiceConfig,
    addr: SocketAddr,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<(), ServiceError> {
    let state = AppState::open(&config.run_dir)?;
    let app = router(state, config.static_dir.as_deref());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_ready(listener.local_addr()?);
        serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
    })?;
    Ok(())
}

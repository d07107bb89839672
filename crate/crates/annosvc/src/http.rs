//! JSON HTTP API over an [`AnnotationStore`].
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/health` | |
//! | GET | `/tasks/next` | `?annotator=NAME` |
//! | GET | `/tasks/{id}` | |
//! | POST | `/tasks/{id}/label` | `{"label", "annotator"}` |
//! | GET | `/stats` | |
//! | POST | `/export` | `{"policy"}` |
//!
//! Errors are `{"error": code, "detail": message}`. When a token is
//! configured every route except `/health` requires it in [`TOKEN_HEADER`].

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gecprep_core::corpus::{Corpus, SentencePair};
use gecprep_core::detok::DetokOutcome;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::store::{export_filtered, AnnotationStore, AnnotationTask, ExportPolicy, Label, StoreError};

pub const TOKEN_HEADER: &str = "x-gecprep-token";

pub struct AppState {
    pub store: Mutex<AnnotationStore>,
    /// Detokenized corpus used by `/export`.
    pub corpus: Corpus,
    pub outcomes: Vec<DetokOutcome>,
    pub token: Option<String>,
}

impl AppState {
    pub fn new(store: AnnotationStore, corpus: Corpus, outcomes: Vec<DetokOutcome>, token: Option<String>) -> Self {
        Self {
            store: Mutex::new(store),
            corpus,
            outcomes,
            token,
        }
    }

    fn store(&self) -> MutexGuard<'_, AnnotationStore> {
        // A panic mid-request leaves the store consistent: every mutation is a
        // single insert after the log write.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match &e {
            StoreError::UnknownTask(_) => (StatusCode::NOT_FOUND, "not_found"),
            StoreError::UnknownLabel(_) => (StatusCode::BAD_REQUEST, "unknown_label"),
            StoreError::UnknownPolicy(_) => (StatusCode::BAD_REQUEST, "unknown_policy"),
            StoreError::BadLog { .. } | StoreError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", e.body_text())
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
    annotator: String,
}

#[derive(Deserialize)]
struct ExportBody {
    policy: String,
}

#[derive(Serialize)]
struct TaskView<'a> {
    #[serde(flatten)]
    task: &'a AnnotationTask,
    label: Option<Label>,
}

#[derive(Serialize)]
struct ExportView<'a> {
    policy: ExportPolicy,
    n_pairs: usize,
    pairs: &'a [SentencePair],
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn next_task(
    State(state): State<Arc<AppState>>,
    query: Result<Query<NextQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    if q.annotator.trim().is_empty() {
        return Err(ApiError::bad_request("annotator must not be empty"));
    }
    let mut store = state.store();
    Ok(match store.next_task(&q.annotator, Instant::now()) {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_task(
    State(state): State<Arc<AppState>>,
    id: Result<Path<u64>, PathRejection>,
) -> Result<Response, ApiError> {
    let Path(id) = id?;
    let store = state.store();
    let task = store.task(id)?;
    Ok(Json(TaskView {
        task,
        label: store.label_of(id),
    })
    .into_response())
}

async fn label_task(
    State(state): State<Arc<AppState>>,
    id: Result<Path<u64>, PathRejection>,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Path(id) = id?;
    let Json(body) = body?;
    let label: Label = body.label.parse()?;
    if body.annotator.trim().is_empty() {
        return Err(ApiError::bad_request("annotator must not be empty"));
    }
    let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let event = state.store().submit_label(id, label, &body.annotator, ts)?;
    tracing::info!(task = id, label = ?label, annotator = %body.annotator, "labeled");
    Ok(Json(event).into_response())
}

async fn stats(State(state): State<Arc<AppState>>) -> Response {
    Json(state.store().stats()).into_response()
}

async fn export(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ExportBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body?;
    let policy: ExportPolicy = body.policy.parse()?;
    let labels = state.store().labels_by_pair();
    let corpus = export_filtered(&state.corpus, &state.outcomes, &labels, policy);
    Ok(Json(ExportView {
        policy,
        n_pairs: corpus.len(),
        pairs: &corpus.pairs,
    })
    .into_response())
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", format!("missing or wrong {TOKEN_HEADER}"))
                .into_response();
        }
    }
    next.run(req).await
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/label", post(label_task))
        .route("/stats", get(stats))
        .route("/export", post(export))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(api)
        .fallback(fallback)
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// A server running on its own runtime thread, stopped on drop.
pub struct Server {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub fn start(state: Arc<AppState>, bind: SocketAddr) -> std::io::Result<Server> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        });
        Ok(Server {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

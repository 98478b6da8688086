//! Read-only HTTP retrieval service.
//!
//! Handlers read an immutable `(model, index)` snapshot; a reload builds a
//! new snapshot off to the side and swaps the pointer, so in-flight
//! requests finish against the one they started with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use esr_core::index::EmbeddingIndex;
use esr_core::model::{Checkpoint, ModelBundle};

use crate::query::{run_query, QueryError, QueryRequest};

pub struct Snapshot {
    pub model: ModelBundle,
    pub index: EmbeddingIndex,
}

impl Snapshot {
    pub fn new(model: ModelBundle, index: EmbeddingIndex) -> esr_core::Result<Self> {
        if model.dim() != index.dim() {
            return Err(esr_core::Error::Config(format!(
                "index dimension {} does not match model dimension {}",
                index.dim(),
                model.dim()
            )));
        }
        Ok(Self { model, index })
    }

    pub fn load(paths: &SnapshotPaths) -> esr_core::Result<Self> {
        let ckpt = Checkpoint::load(&paths.checkpoint)?;
        let index = EmbeddingIndex::load(&paths.index)?;
        Self::new(ckpt.model, index)
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotPaths {
    pub index: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Clone)]
pub struct AppState {
    current: Arc<RwLock<Arc<Snapshot>>>,
    paths: Option<SnapshotPaths>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, paths: Option<SnapshotPaths>) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(snapshot))),
            paths,
        }
    }

    pub fn from_paths(paths: SnapshotPaths) -> esr_core::Result<Self> {
        let snapshot = Snapshot::load(&paths)?;
        Ok(Self::new(snapshot, Some(paths)))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn swap(&self, snapshot: Snapshot) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snapshot);
    }

    /// Reloads index and checkpoint from disk. On failure the current
    /// snapshot stays in place.
    pub fn reload(&self) -> esr_core::Result<()> {
        let Some(paths) = &self.paths else {
            return Err(esr_core::Error::Config(
                "service was not started from files".into(),
            ));
        };
        self.swap(Snapshot::load(paths)?);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCount {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylesResponse {
    pub styles: Vec<StyleCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub index_size: usize,
    pub model_d: usize,
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: QueryRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))?;
    let snap = state.snapshot();
    match run_query(&snap.model, &snap.index, &req) {
        Ok(resp) => Ok(Json(resp).into_response()),
        Err(QueryError::Invalid(msg)) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg)),
        Err(QueryError::Core(e)) => {
            log::error!("query failed: {e}");
            Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
        }
    }
}

/// Every registered style with its number of index rows.
async fn styles(State(state): State<AppState>) -> Json<StylesResponse> {
    let snap = state.snapshot();
    let mut counts: BTreeMap<&str, usize> = snap
        .model
        .registry
        .names()
        .iter()
        .map(|n| (n.as_str(), 0))
        .collect();
    for meta in snap.index.metadata().values() {
        if let Some(c) = meta.style.as_deref().and_then(|s| counts.get_mut(s)) {
            *c += 1;
        }
    }
    let styles = snap
        .model
        .registry
        .names()
        .iter()
        .map(|n| StyleCount {
            name: n.clone(),
            count: counts[n.as_str()],
        })
        .collect();
    Json(StylesResponse { styles })
}

async fn clip(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown clip {id:?}"));
    let path = {
        let snap = state.snapshot();
        snap.index
            .meta(&id)
            .and_then(|m| m.path.clone())
            .ok_or_else(not_found)?
    };
    let bytes = tokio::fs::read(Path::new(&path)).await.map_err(|e| {
        log::warn!("clip {id}: cannot read {path}: {e}");
        not_found()
    })?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

async fn health(State(state): State<AppState>) -> Json<HealthResponse> {
    let snap = state.snapshot();
    Json(HealthResponse {
        status: "ok".into(),
        index_size: snap.index.len(),
        model_d: snap.model.dim(),
    })
}

/// The API under `/api`; with `static_dir`, everything else is served from it.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/query", post(query))
        .route("/api/styles", get(styles))
        .route("/api/clip/{id}", get(clip))
        .route("/api/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until Ctrl-C, reloading the snapshot on SIGHUP.
pub async fn serve(
    state: AppState,
    addr: std::net::SocketAddr,
    static_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        let state = state.clone();
        let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
        tokio::spawn(async move {
            while hup.recv().await.is_some() {
                let s = state.clone();
                match tokio::task::spawn_blocking(move || s.reload()).await {
                    Ok(Ok(())) => log::info!("reloaded index and checkpoint"),
                    Ok(Err(e)) => log::error!("reload failed, keeping the current snapshot: {e}"),
                    Err(e) => log::error!("reload task failed: {e}"),
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir.as_deref()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

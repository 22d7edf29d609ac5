//! HTTP retrieval service: embeds text queries with a decoder-free model
//! and ranks a precomputed gallery index.
//!
//! Endpoints:
//! - `POST /query {"text": str, "k": int}`
//! - `GET /model/{id}/points` (little-endian `f32` `N x 3`, `X-Point-Count` header)
//! - `GET /healthz`

mod error;

use std::fs;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::header::{HeaderName, CONTENT_TYPE};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use cadret_core::corpus::decode_points;
use cadret_core::{GalleryIndex, InferenceModel};
use serde::{Deserialize, Serialize};

pub use error::{Result, ServiceError};

pub const DEFAULT_K: i64 = 10;
pub const POINT_COUNT_HEADER: &str = "x-point-count";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default = "default_k")]
    pub k: i64,
}

fn default_k() -> i64 {
    DEFAULT_K
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub score: f64,
    pub text_snippet: String,
    pub preview_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
}

/// An immutable (model, index) pair. Requests always run against one snapshot.
#[derive(Debug)]
pub struct Snapshot {
    pub model: InferenceModel,
    pub index: GalleryIndex,
    pub index_dir: PathBuf,
}

impl Snapshot {
    /// Pairs a model with an index, refusing mismatched versions.
    pub fn new(model: InferenceModel, index: GalleryIndex, index_dir: impl Into<PathBuf>) -> Result<Self> {
        if model.model_version != index.model_version() {
            return Err(ServiceError::VersionMismatch {
                checkpoint: model.model_version.clone(),
                index: index.model_version().to_string(),
            });
        }
        let expected = model.model.config.embedding_dim();
        if index.dim() != expected {
            return Err(ServiceError::Core(cadret_core::Error::Shape(format!(
                "index rows have {} dims, the model embeds into {expected}",
                index.dim()
            ))));
        }
        Ok(Snapshot {
            model,
            index,
            index_dir: index_dir.into(),
        })
    }

    /// Loads a checkpoint (decoder and optimizer state are dropped) and an index directory.
    pub fn load(checkpoint: &Path, index_dir: &Path) -> Result<Self> {
        let model = InferenceModel::load(checkpoint)?;
        let index = GalleryIndex::load(index_dir)?;
        tracing::info!(
            model_version = %model.model_version,
            gallery = index.len(),
            dropped = model.dropped,
            "snapshot loaded"
        );
        Self::new(model, index, index_dir)
    }

    pub fn model_version(&self) -> &str {
        &self.model.model_version
    }
}

pub fn preview_url(id: &str) -> String {
    format!("/model/{id}/points")
}

/// Embeds `req.text` and returns the top `req.k` gallery items.
pub fn handle_query(snapshot: &Snapshot, req: &QueryRequest) -> Result<QueryResponse> {
    let start = Instant::now();
    if req.text.trim().is_empty() {
        return Err(ServiceError::EmptyText);
    }
    let n = snapshot.index.len();
    if req.k < 1 || req.k as u64 > n as u64 {
        return Err(ServiceError::KOutOfRange { k: req.k, max: n });
    }
    let query = snapshot.model.embed_text(&req.text)?;
    let top = snapshot
        .index
        .top_k(query.as_slice().expect("contiguous query"), req.k as usize)?;
    let ids = snapshot.index.ids();
    let results = top
        .into_iter()
        .map(|(i, score)| {
            let id = &ids[i];
            QueryHit {
                id: id.clone(),
                score,
                text_snippet: snapshot.index.meta(id).map(|m| m.text_snippet.clone()).unwrap_or_default(),
                preview_url: preview_url(id),
            }
        })
        .collect();
    Ok(QueryResponse {
        results,
        model_version: snapshot.model_version().to_string(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Raw little-endian `f32` point payload of `id` and its point count.
pub fn get_points(snapshot: &Snapshot, id: &str) -> Result<(Vec<u8>, usize)> {
    if snapshot.index.position(id).is_none() {
        return Err(ServiceError::UnknownId(id.to_string()));
    }
    let path = snapshot
        .index
        .points_file(&snapshot.index_dir, id)
        .ok_or_else(|| ServiceError::NoPoints(id.to_string()))?;
    let bytes = fs::read(&path).map_err(|e| cadret_core::Error::io(&path, e))?;
    let n = decode_points(&bytes)
        .map_err(|reason| cadret_core::Error::Format(format!("{}: {reason}", path.display())))?
        .nrows();
    Ok((bytes, n))
}

/// Shared state holding the current snapshot. Swaps are atomic: a request
/// clones the `Arc` once and sees a single consistent pair.
#[derive(Debug)]
pub struct AppState {
    current: RwLock<Arc<Snapshot>>,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Self {
        AppState {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `next` and returns the previous snapshot.
    pub fn swap(&self, next: Snapshot) -> Arc<Snapshot> {
        let mut guard = self.current.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, Arc::new(next))
    }
}

async fn query_route(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>> {
    let Json(req) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let snapshot = state.snapshot();
    let resp = tokio::task::spawn_blocking(move || handle_query(&snapshot, &req))
        .await
        .map_err(|e| ServiceError::Core(cadret_core::Error::Config(format!("query task failed: {e}"))))??;
    Ok(Json(resp))
}

async fn points_route(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<impl IntoResponse> {
    let snapshot = state.snapshot();
    let (bytes, n) = get_points(&snapshot, &id)?;
    Ok((
        [
            (CONTENT_TYPE, "application/octet-stream".to_string()),
            (HeaderName::from_static(POINT_COUNT_HEADER), n.to_string()),
        ],
        bytes,
    ))
}

async fn health_route(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_version: state.snapshot().model_version().to_string(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/query", post(query_route))
        .route("/model/{id}/points", get(points_route))
        .route("/healthz", get(health_route))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

//! JSON-over-HTTP search API.
//!
//! The loaded artifacts live behind a swappable handle; requests clone the
//! current `Arc<Engine>` and never block a reload.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use objfind_core::associate::ProjectionHeads;
use objfind_core::catalog::{DatasetCatalog, ObjectRecord};
use objfind_core::encoder::{encoder_from_config, Encoder, EncoderError};
use objfind_core::index::{IndexError, RankedResult, SearchIndex, SearchQuery, MAX_K};
use objfind_core::labeler::{Description, PromptKind};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::trace::TraceLayer;

use crate::config::ServiceConfig;

pub const API_VERSION: &str = "1";
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_VISUAL_FOCUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<std::path::PathBuf>),
    #[error("{what}: {message}")]
    Artifact { what: &'static str, message: String },
    #[error("index was built with heads {index}, heads file is {heads}")]
    HeadsMismatch { index: String, heads: String },
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
}

/// Everything a request needs, immutable once built.
pub struct Engine {
    pub catalog: DatasetCatalog,
    pub index: SearchIndex,
    pub heads: ProjectionHeads,
    pub encoder: Arc<dyn Encoder>,
    pub asset_base_url: String,
}

impl Engine {
    pub fn new(
        catalog: DatasetCatalog,
        index: SearchIndex,
        heads: ProjectionHeads,
        encoder: Arc<dyn Encoder>,
        asset_base_url: impl Into<String>,
    ) -> Result<Self, LoadError> {
        if index.heads_version() != heads.version {
            return Err(LoadError::HeadsMismatch {
                index: index.heads_version().to_owned(),
                heads: heads.version.clone(),
            });
        }
        Ok(Self {
            catalog,
            index,
            heads,
            encoder,
            asset_base_url: asset_base_url.into(),
        })
    }

    pub fn load(config: &ServiceConfig) -> Result<Self, LoadError> {
        let missing = config.missing_paths();
        if !missing.is_empty() {
            return Err(LoadError::Missing(missing));
        }
        let artifact = |what: &'static str| move |e: &dyn std::fmt::Display| LoadError::Artifact {
            what,
            message: e.to_string(),
        };
        let text = std::fs::read_to_string(&config.catalog_path).map_err(|e| artifact("catalog")(&e))?;
        let catalog = DatasetCatalog::from_json(&text).map_err(|e| artifact("catalog")(&e))?;
        let file = File::open(&config.index_path).map_err(|e| artifact("index")(&e))?;
        let index = SearchIndex::read_from(BufReader::new(file)).map_err(|e| artifact("index")(&e))?;
        let file = File::open(&config.heads_path).map_err(|e| artifact("heads")(&e))?;
        let (heads, _) = ProjectionHeads::read_from(BufReader::new(file)).map_err(|e| artifact("heads")(&e))?;
        let encoder: Arc<dyn Encoder> = Arc::from(encoder_from_config(&config.encoder)?);
        Self::new(catalog, index, heads, encoder, config.asset_base_url.clone())
    }

    /// Joins the asset base and a catalog ref; absolute URLs pass through.
    pub fn asset_url(&self, reference: &str) -> String {
        if reference.starts_with("http://") || reference.starts_with("https://") {
            return reference.to_owned();
        }
        format!(
            "{}/{}",
            self.asset_base_url.trim_end_matches('/'),
            reference.trim_start_matches('/')
        )
    }

    fn result_item(&self, r: RankedResult) -> ResultItem {
        let record = self.catalog.record(&r.object_id);
        ResultItem {
            image_url: record.map(|rec| self.asset_url(&rec.image_ref)),
            model_download_url: record.map(|rec| self.asset_url(&rec.model_ref)),
            description: self
                .catalog
                .description_text(&r.object_id, Some(PromptKind::Template))
                .map(str::to_owned),
            object_id: r.object_id,
            score: r.score,
            rank: r.rank,
            image_score: r.image_score,
            text_score: r.text_score,
        }
    }
}

pub struct AppState {
    engine: RwLock<Option<Arc<Engine>>>,
    config: Option<ServiceConfig>,
    encode_permits: Semaphore,
    generation: AtomicU64,
}

impl AppState {
    pub fn new(engine: Option<Engine>, config: Option<ServiceConfig>, max_inflight_encodes: usize) -> Arc<Self> {
        Arc::new(Self {
            generation: AtomicU64::new(u64::from(engine.is_some())),
            engine: RwLock::new(engine.map(Arc::new)),
            config,
            encode_permits: Semaphore::new(max_inflight_encodes.max(1)),
        })
    }

    /// Loads artifacts named by `config`; a load failure leaves the service
    /// up without an index.
    pub fn from_config(config: ServiceConfig) -> (Arc<Self>, Option<LoadError>) {
        let (engine, err) = match Engine::load(&config) {
            Ok(e) => (Some(e), None),
            Err(e) => (None, Some(e)),
        };
        let permits = config.max_inflight_encodes;
        (Self::new(engine, Some(config), permits), err)
    }

    pub fn engine(&self) -> Option<Arc<Engine>> {
        self.engine.read().expect("engine lock").clone()
    }

    /// Installs a new engine and returns its generation number.
    pub fn swap(&self, engine: Engine) -> u64 {
        let mut slot = self.engine.write().expect("engine lock");
        *slot = Some(Arc::new(engine));
        self.generation.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_parameter", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "index_unavailable", "no index is loaded")
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<IndexError> for ApiError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Query(_) | IndexError::Encoder(EncoderError::EmptyText) => Self::invalid(e.to_string()),
            IndexError::UnknownId(_) => Self::not_found(e.to_string()),
            IndexError::Empty => Self::unavailable(),
            IndexError::Encoder(_) => Self::new(StatusCode::BAD_GATEWAY, "encoder_failure", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "api_version": API_VERSION,
            "error": { "code": self.code, "message": self.message },
        });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default)]
    pub k: Option<i64>,
    #[serde(default)]
    pub visual_focus: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub object_id: String,
    pub score: f64,
    pub rank: usize,
    pub image_score: f64,
    pub text_score: f64,
    pub image_url: Option<String>,
    pub model_download_url: Option<String>,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub api_version: String,
    pub heads_version: String,
    pub results: Vec<ResultItem>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetail {
    pub api_version: String,
    pub object: ObjectRecord,
    pub descriptions: Vec<Description>,
    pub image_url: String,
    pub model_download_url: String,
    pub indexed: bool,
}

fn check_k(k: i64) -> Result<usize, ApiError> {
    if !(1..=MAX_K as i64).contains(&k) {
        return Err(ApiError::invalid(format!("k must be between 1 and {MAX_K}, got {k}")));
    }
    Ok(k as usize)
}

fn current(state: &AppState) -> Result<Arc<Engine>, ApiError> {
    state.engine().ok_or_else(ApiError::unavailable)
}

async fn search(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SearchRequest>, JsonRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let started = Instant::now();
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let k = check_k(req.k.unwrap_or(DEFAULT_K as i64))?;
    let alpha = req.visual_focus.unwrap_or(DEFAULT_VISUAL_FOCUS);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::invalid(format!("visual_focus must be between 0 and 1, got {alpha}")));
    }
    let query = SearchQuery::new(req.query.clone(), k, alpha)?;
    let engine = current(&state)?;
    let _permit = state
        .encode_permits
        .acquire()
        .await
        .map_err(|_| ApiError::internal("encoder pool closed"))?;
    let worker = Arc::clone(&engine);
    let results = tokio::task::spawn_blocking(move || worker.index.search_text(&query, &worker.heads, worker.encoder.as_ref()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    tracing::info!(query = %req.query, k, visual_focus = alpha, hits = results.len(), elapsed_ms, "search");
    Ok(Json(SearchResponse {
        api_version: API_VERSION.into(),
        heads_version: engine.heads.version.clone(),
        results: results.into_iter().map(|r| engine.result_item(r)).collect(),
        elapsed_ms,
    }))
}

async fn similar(
    State(state): State<Arc<AppState>>,
    Path(object_id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<SearchResponse>, ApiError> {
    let started = Instant::now();
    let k = match params.get("k") {
        None => DEFAULT_K,
        Some(raw) => check_k(
            raw.parse()
                .map_err(|_| ApiError::invalid(format!("k must be an integer between 1 and {MAX_K}, got {raw:?}")))?,
        )?,
    };
    let engine = current(&state)?;
    let results = engine.index.search_similar(&object_id, k)?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    tracing::info!(object_id = %object_id, k, hits = results.len(), elapsed_ms, "similar");
    Ok(Json(SearchResponse {
        api_version: API_VERSION.into(),
        heads_version: engine.heads.version.clone(),
        results: results.into_iter().map(|r| engine.result_item(r)).collect(),
        elapsed_ms,
    }))
}

async fn object_detail(
    State(state): State<Arc<AppState>>,
    Path(object_id): Path<String>,
) -> Result<Json<ObjectDetail>, ApiError> {
    let engine = current(&state)?;
    let record = engine
        .catalog
        .record(&object_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown object id: {object_id}")))?;
    Ok(Json(ObjectDetail {
        api_version: API_VERSION.into(),
        object: record.clone(),
        descriptions: engine.catalog.descriptions_of(&object_id).to_vec(),
        image_url: engine.asset_url(&record.image_ref),
        model_download_url: engine.asset_url(&record.model_ref),
        indexed: engine.index.contains(&object_id),
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.engine() {
        Some(engine) => Json(json!({
            "api_version": API_VERSION,
            "status": "ok",
            "index_size": engine.index.len(),
            "heads_version": engine.heads.version,
            "generation": state.generation(),
        }))
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "api_version": API_VERSION, "status": "unavailable" })),
        )
            .into_response(),
    }
}

async fn reload(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let config = state
        .config
        .clone()
        .ok_or_else(|| ApiError::invalid("service was started without a config to reload from"))?;
    let engine = tokio::task::spawn_blocking(move || Engine::load(&config))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(format!("reload failed, previous index kept: {e}")))?;
    let (size, version) = (engine.index.len(), engine.heads.version.clone());
    let generation = state.swap(engine);
    tracing::info!(generation, size, heads_version = %version, "reloaded");
    Ok(Json(json!({
        "api_version": API_VERSION,
        "status": "reloaded",
        "index_size": size,
        "heads_version": version,
        "generation": generation,
    })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/search", post(search))
        .route("/api/similar/{object_id}", get(similar))
        .route("/api/objects/{object_id}", get(object_detail))
        .route("/api/reload", post(reload))
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

/// Serves until Ctrl-C. Prints the bound address on stdout first.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

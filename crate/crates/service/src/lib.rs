//! Read-only HTTP service: sentence and image retrieval plus node lookup
//! over a saved gloss index.
//!
//! Every response body is JSON. Errors come back as `{"error": "..."}`.

use std::collections::BTreeSet;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tower::limit::ConcurrencyLimitLayer;
use tower_http::timeout::TimeoutLayer;
use vsem_core::corpus::{read_graph, CorpusError};
use vsem_core::embed::{provider_from_spec, EmbeddingProvider, ProviderError};
use vsem_core::kg::{FrozenGraph, Lang, RelationType};
use vsem_core::pipeline::InvalidImage;
use vsem_core::retrieval::{
    retrieve_by_image, retrieve_by_sentence, GlossIndex, QueryResult, RetrievalError, MAX_K,
};

pub const DEFAULT_MAX_BODY_BYTES: usize = 8 * 1024 * 1024;
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_CONCURRENT: usize = 64;
pub const DEFAULT_K: i64 = 10;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    InvalidConfig(String),
    #[error("index failed validation: {0}")]
    Index(#[from] RetrievalError),
    #[error("graph failed validation: {0}")]
    Graph(#[from] CorpusError),
    #[error("index node {0} is missing from the graph")]
    GraphMismatch(String),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("provider dimension {provider} does not match index dimension {index}")]
    DimensionMismatch { index: usize, provider: usize },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
    #[error("loading task failed: {0}")]
    Load(String),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub index: PathBuf,
    /// Graph for node lookup; falls back to the path recorded in the index metadata.
    pub graph: Option<PathBuf>,
    /// Query encoder spec; falls back to the provider recorded in the index metadata.
    pub provider: Option<String>,
    pub provider_timeout: Duration,
    pub max_body_bytes: usize,
    pub request_timeout: Duration,
    pub max_concurrent: usize,
}

impl ServiceConfig {
    pub fn new(addr: SocketAddr, index: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            addr,
            index: index.into(),
            graph: None,
            provider: None,
            provider_timeout: vsem_core::embed::DEFAULT_REQUEST_TIMEOUT,
            max_body_bytes: DEFAULT_MAX_BODY_BYTES,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            max_concurrent: DEFAULT_MAX_CONCURRENT,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_body_bytes == 0 {
            return Err(ServiceError::InvalidConfig("max body bytes must be positive".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(ServiceError::InvalidConfig("request timeout must be positive".into()));
        }
        if self.provider_timeout.is_zero() {
            return Err(ServiceError::InvalidConfig("provider timeout must be positive".into()));
        }
        if self.max_concurrent == 0 {
            return Err(ServiceError::InvalidConfig("max concurrent requests must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a request needs, shared read-only across handlers.
pub struct Loaded {
    index: GlossIndex,
    english: Option<GlossIndex>,
    graph: Option<FrozenGraph>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl Loaded {
    /// Checks that the provider matches the index and that every indexed
    /// node exists in the graph, if one is given.
    pub fn new(
        index: GlossIndex,
        graph: Option<FrozenGraph>,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, ServiceError> {
        if provider.dim() != index.dim() {
            return Err(ServiceError::DimensionMismatch {
                index: index.dim(),
                provider: provider.dim(),
            });
        }
        if let Some(g) = &graph {
            if let Some(row) = index.rows().iter().find(|r| !g.contains(r.node.as_str())) {
                return Err(ServiceError::GraphMismatch(row.node.to_string()));
            }
        }
        let english = if index.languages().contains(&Lang::En) {
            Some(index.restrict_to(&BTreeSet::from([Lang::En]))?)
        } else {
            None
        };
        Ok(Loaded {
            index,
            english,
            graph,
            provider,
        })
    }

    /// Reads the index, graph and provider named by `config`.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let index = GlossIndex::load(&config.index)?;
        let graph_path = config
            .graph
            .clone()
            .or_else(|| index.meta().graph.as_ref().map(|g| relative_to(&config.index, g)));
        let graph = match graph_path {
            Some(p) => Some(read_graph(&p)?.freeze()),
            None => None,
        };
        let spec = config
            .provider
            .clone()
            .or_else(|| index.meta().provider.clone())
            .ok_or_else(|| {
                ServiceError::InvalidConfig("no provider given and none recorded in the index".into())
            })?;
        let provider: Arc<dyn EmbeddingProvider> =
            Arc::from(provider_from_spec(&spec, index.dim(), config.provider_timeout)?);
        Loaded::new(index, graph, provider)
    }

    pub fn index(&self) -> &GlossIndex {
        &self.index
    }

    /// English-only view used for image queries.
    pub fn image_index(&self) -> Option<&GlossIndex> {
        self.english.as_ref()
    }

    pub fn graph(&self) -> Option<&FrozenGraph> {
        self.graph.as_ref()
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }
}

fn relative_to(index: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    index.parent().unwrap_or(Path::new(".")).join(p)
}

/// Shared handler state. Empty until loading finishes.
#[derive(Clone, Default)]
pub struct AppState {
    loaded: Arc<OnceLock<Arc<Loaded>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::default();
        s.set_ready(loaded);
        s
    }

    /// Returns false if the state was already ready.
    pub fn set_ready(&self, loaded: Loaded) -> bool {
        self.loaded.set(Arc::new(loaded)).is_ok()
    }

    pub fn is_ready(&self) -> bool {
        self.loaded.get().is_some()
    }

    fn get(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index is loading"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::EmptyQuery | RetrievalError::InvalidK(_) => StatusCode::BAD_REQUEST,
            RetrievalError::InvalidImage(InvalidImage::Corrupt(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            RetrievalError::InvalidImage(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            RetrievalError::Provider { .. }
            | RetrievalError::DimensionMismatch { .. }
            | RetrievalError::Embedding(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceRequest {
    text: String,
    #[serde(default = "default_lang")]
    lang: Lang,
    #[serde(default = "default_k")]
    k: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRequest {
    image_b64: String,
    #[serde(default = "default_k")]
    k: i64,
}

fn default_lang() -> Lang {
    Lang::En
}

fn default_k() -> i64 {
    DEFAULT_K
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    nodes: usize,
    glosses: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossView {
    pub lang: Lang,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborView {
    pub relation: RelationType,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDetail {
    pub id: String,
    /// Sorted by language code, then text.
    pub glosses: Vec<GlossView>,
    /// Content hashes in hex, sorted.
    pub images: Vec<String>,
    /// In the order of the graph's neighbor query.
    pub neighbors: Vec<NeighborView>,
}

impl NodeDetail {
    pub fn from_graph(graph: &FrozenGraph, id: &str) -> Option<Self> {
        let node = graph.node(id)?;
        let mut glosses: Vec<GlossView> = node
            .glosses
            .iter()
            .map(|g| GlossView {
                lang: g.lang,
                text: g.text.clone(),
            })
            .collect();
        glosses.sort_by(|a, b| (a.lang.code(), &a.text).cmp(&(b.lang.code(), &b.text)));
        let mut images: Vec<String> = node.images.iter().map(|i| i.content_hash.to_hex()).collect();
        images.sort();
        let neighbors = graph
            .neighbors(id, None)
            .ok()?
            .into_iter()
            .map(|(relation, n)| NeighborView {
                relation,
                node: n.to_string(),
            })
            .collect();
        Some(NodeDetail {
            id: node.id.to_string(),
            glosses,
            images,
            neighbors,
        })
    }
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/retrieve/sentence", post(sentence))
        .route("/retrieve/image", post(image))
        .route("/node/{id}", get(node))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .layer(DefaultBodyLimit::max(config.max_body_bytes))
        .layer(TimeoutLayer::with_status_code(
            StatusCode::REQUEST_TIMEOUT,
            config.request_timeout,
        ))
        .layer(ConcurrencyLimitLayer::new(config.max_concurrent))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Result<Json<Health>, ApiError> {
    let loaded = state.get()?;
    Ok(Json(Health {
        status: "ok",
        nodes: loaded.index.node_count(),
        glosses: loaded.index.len(),
    }))
}

fn json_body<T: serde::de::DeserializeOwned>(
    headers: &HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<T, ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .is_some_and(|m| m.trim().eq_ignore_ascii_case("application/json"));
    if !is_json {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "content-type must be application/json",
        ));
    }
    let body = body.map_err(|r| ApiError::new(r.status(), r.body_text()))?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn check_k(k: i64) -> Result<usize, ApiError> {
    usize::try_from(k)
        .ok()
        .filter(|k| (1..=MAX_K).contains(k))
        .ok_or_else(|| ApiError::bad_request(format!("k must be between 1 and {MAX_K}, got {k}")))
}

async fn blocking<F>(f: F) -> Result<Json<QueryResult>, ApiError>
where
    F: FnOnce() -> Result<QueryResult, RetrievalError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn sentence(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<QueryResult>, ApiError> {
    let loaded = state.get()?;
    let req: SentenceRequest = json_body(&headers, body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text must not be empty"));
    }
    let k = check_k(req.k)?;
    blocking(move || retrieve_by_sentence(&loaded.index, loaded.provider(), &req.text, req.lang, k)).await
}

async fn image(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<QueryResult>, ApiError> {
    let loaded = state.get()?;
    let req: ImageRequest = json_body(&headers, body)?;
    let k = check_k(req.k)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.image_b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image_b64 is not valid base64: {e}")))?;
    if loaded.english.is_none() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "index has no English glosses to match images against",
        ));
    }
    blocking(move || {
        let index = loaded.english.as_ref().expect("checked above");
        retrieve_by_image(index, loaded.provider(), &bytes, k)
    })
    .await
}

async fn node(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<NodeDetail>, ApiError> {
    let loaded = state.get()?;
    let graph = loaded
        .graph
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_IMPLEMENTED, "no graph loaded for node lookup"))?;
    NodeDetail::from_graph(graph, &id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown node {id}")))
}

/// Binds `config.addr`, then serves until `shutdown` resolves.
pub async fn serve(
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    config.validate()?;
    let listener = TcpListener::bind(config.addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.addr,
            source,
        })?;
    serve_on(listener, config, shutdown).await
}

/// Serves on an already bound listener. Requests get 503 until the index
/// has loaded; if loading fails the server stops and the error is returned.
pub async fn serve_on(
    listener: TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    config.validate()?;
    let state = AppState::loading();
    let app = router(state.clone(), &config);
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<ServiceError>();

    let load_config = config.clone();
    let load_state = state.clone();
    tokio::spawn(async move {
        let result = tokio::task::spawn_blocking(move || Loaded::load(&load_config)).await;
        match result {
            Ok(Ok(loaded)) => {
                tracing::info!(
                    nodes = loaded.index.node_count(),
                    glosses = loaded.index.len(),
                    "index loaded"
                );
                load_state.set_ready(loaded);
            }
            Ok(Err(e)) => {
                let _ = fail_tx.send(e);
            }
            Err(e) => {
                let _ = fail_tx.send(ServiceError::Load(e.to_string()));
            }
        }
    });

    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    let failure = Arc::new(tokio::sync::Mutex::new(None));
    let failure_slot = Arc::clone(&failure);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = shutdown => {}
                Ok(e) = fail_rx => {
                    *failure_slot.lock().await = Some(e);
                }
            }
        })
        .await
        .map_err(ServiceError::Serve)?;
    let failed = failure.lock().await.take();
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

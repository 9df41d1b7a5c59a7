//! JSON routes over the shared graph store and the optional model.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path as UrlPath, Request, State};
use axum::http::request::Parts;
use axum::routing::{get, post};
use axum::{Json, Router};
use iskg_core::apps::{
    answer, infer_paths, resolve_node, retrieve, trace_back, AnswerStatus, AppError, EntityExtractor,
    PropagationPath, RetrievalResult, SlotKeywords, VocabularyExtractor, DEFAULT_TRACE_DEPTH, OUT_OF_SCOPE_MESSAGE,
};
use iskg_core::corpus::BioLabel;
use iskg_core::graph::{
    build_triples, export_json, extracted_entities, import_json, BuiltTriples, GraphStore, IngestStats, IskEdge,
    IskNode, Relation,
};
use iskg_core::iskf::Entity;
use iskg_core::model::{ExtractedSpan, Hainex};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ErrorCode};

/// Shared state. Graph writes take the write lock; the model is read-only.
#[derive(Clone)]
pub struct AppState {
    pub graph: Arc<RwLock<GraphStore>>,
    pub model: Option<Arc<Hainex>>,
    /// Snapshot rewritten after every non-empty ingest.
    pub snapshot: Option<PathBuf>,
    pub keywords: Arc<SlotKeywords>,
}

impl AppState {
    pub fn new(graph: GraphStore, model: Option<Hainex>) -> Self {
        Self {
            graph: Arc::new(RwLock::new(graph)),
            model: model.map(Arc::new),
            snapshot: None,
            keywords: Arc::new(SlotKeywords::default()),
        }
    }

    /// Loads the model and graph named by `config`. A configured graph file
    /// that does not exist yet starts empty, or as the demo graph when
    /// `config.demo` is set.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, String> {
        let model = match &config.model {
            Some(p) => Some(Hainex::load(p).map_err(|e| format!("loading model {}: {e}", p.display()))?),
            None => None,
        };
        let graph = match &config.graph {
            Some(p) if p.exists() => load_graph(p)?,
            _ if config.demo => iskg_core::fixtures::demo_store(),
            _ => GraphStore::new(),
        };
        let mut state = Self::new(graph, model);
        state.snapshot = config.graph.clone();
        state.keywords = Arc::new(config.keywords.clone());
        Ok(state)
    }

    fn read(&self) -> Result<std::sync::RwLockReadGuard<'_, GraphStore>, ApiError> {
        self.graph.read().map_err(|_| ApiError::internal("graph lock poisoned"))
    }
}

pub fn load_graph(path: &Path) -> Result<GraphStore, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    import_json(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames over `path`.
pub fn save_graph(store: &GraphStore, path: &Path) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, export_json(store))?;
    std::fs::rename(tmp, path)
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    let api = Router::new()
        .route("/extract", post(extract))
        .route("/ingest", post(ingest))
        .route("/graph/node/{id}", get(node))
        .route("/graph/neighbors/{id}", get(neighbors))
        .route("/qas", post(qas))
        .route("/paths/trace", get(trace))
        .route("/paths/inferred", get(inferred))
        .layer(DefaultBodyLimit::max(config.body_limit))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("no such route") }),
    }
}

/// JSON body whose rejections become `bad_request`.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Self(v))
            .map_err(|e: JsonRejection| ApiError::bad_request("invalid request body").with_detail(e.body_text()))
    }
}

/// Query string whose rejections become `bad_request`.
pub struct ApiQuery<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for ApiQuery<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| Self(q.0))
            .map_err(|e: QueryRejection| ApiError::bad_request("invalid query string").with_detail(e.body_text()))
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub struct ExtractRequest {
    pub text: String,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct ExtractResponse {
    pub labels: Vec<BioLabel>,
    pub spans: Vec<ExtractedSpan>,
}

async fn run_model<T: Send + 'static>(
    model: Arc<Hainex>,
    f: impl FnOnce(&Hainex) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&model)).await.map_err(ApiError::internal)?
}

async fn extract(State(s): State<AppState>, ApiJson(req): ApiJson<ExtractRequest>) -> Result<Json<ExtractResponse>, ApiError> {
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text is empty"));
    }
    let model = s.model.clone().ok_or_else(ApiError::model_missing)?;
    let (labels, spans) = run_model(model, move |m| {
        m.extract(&req.text).map_err(|e| ApiError::bad_request("extraction failed").with_detail(e.to_string()))
    })
    .await?;
    Ok(Json(ExtractResponse { labels, spans }))
}

/// A raw description; requires the model.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SentenceInput {
    pub id: String,
    pub text: String,
}

/// A description whose entities are already known, in narrative order.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct EventInput {
    pub id: String,
    pub entities: Vec<Entity>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestRequest {
    pub sentences: Vec<SentenceInput>,
    pub events: Vec<EventInput>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
pub struct IngestResponse {
    pub nodes_added: usize,
    pub edges_added: usize,
    /// Descriptions whose entity list left a dangling half.
    pub partial: Vec<String>,
    pub warnings: Vec<String>,
}

async fn ingest(State(s): State<AppState>, ApiJson(req): ApiJson<IngestRequest>) -> Result<Json<IngestResponse>, ApiError> {
    let mut ids = BTreeSet::new();
    for id in req.sentences.iter().map(|x| &x.id).chain(req.events.iter().map(|x| &x.id)) {
        if id.trim().is_empty() {
            return Err(ApiError::bad_request("every sentence and event needs a non-empty id"));
        }
        if !ids.insert(id.clone()) {
            return Err(ApiError::bad_request(format!("duplicate id `{id}` in request")));
        }
    }
    // Everything is built before the store is touched, so a bad item
    // leaves the graph unchanged.
    let mut built: Vec<BuiltTriples> = req.events.iter().map(|e| build_triples(&e.id, &e.entities)).collect();
    if !req.sentences.is_empty() {
        let model = s.model.clone().ok_or_else(ApiError::model_missing)?;
        let sentences = req.sentences;
        let from_text = run_model(model, move |m| {
            sentences
                .iter()
                .map(|x| {
                    let (_, spans) = m.extract(&x.text).map_err(|e| {
                        ApiError::bad_request(format!("sentence `{}` could not be extracted", x.id)).with_detail(e.to_string())
                    })?;
                    Ok(build_triples(&x.id, &extracted_entities(&spans)))
                })
                .collect::<Result<Vec<_>, ApiError>>()
        })
        .await?;
        built.extend(from_text);
    }

    let mut store = s.graph.write().map_err(|_| ApiError::internal("graph lock poisoned"))?;
    let mut out = IngestResponse::default();
    for b in &built {
        let IngestStats { nodes_added, edges_added } = store.ingest(b);
        out.nodes_added += nodes_added;
        out.edges_added += edges_added;
        if b.partial {
            out.partial.push(b.id.clone());
        }
        out.warnings.extend(b.warnings.iter().map(|w| format!("{}: {w}", b.id)));
    }
    if let Some(path) = &s.snapshot {
        if !built.is_empty() {
            save_graph(&store, path).map_err(ApiError::internal)?;
        }
    }
    Ok(Json(out))
}

fn find_node<'a>(store: &'a GraphStore, reference: &str) -> Result<&'a IskNode, ApiError> {
    resolve_node(store, reference).ok_or_else(|| ApiError::not_found(format!("node `{reference}` not found")))
}

#[derive(Debug, Deserialize, Serialize)]
pub struct NodeResponse {
    pub node: IskNode,
    pub retrieval: RetrievalResult,
}

async fn node(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NodeResponse>, ApiError> {
    let store = s.read()?;
    let node = find_node(&store, &id)?.clone();
    let retrieval = retrieve(&store, &node.text);
    Ok(Json(NodeResponse { node, retrieval }))
}

#[derive(Debug, Default, Deserialize)]
pub struct NeighborsQuery {
    pub relation: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct Neighbor {
    pub edge: IskEdge,
    pub node: IskNode,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct NeighborsResponse {
    pub node: IskNode,
    pub neighbors: Vec<Neighbor>,
}

async fn neighbors(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    ApiQuery(q): ApiQuery<NeighborsQuery>,
) -> Result<Json<NeighborsResponse>, ApiError> {
    let relation = match q.relation.as_deref().filter(|r| !r.is_empty()) {
        Some(r) => Some(r.parse::<Relation>().map_err(|e| ApiError::bad_request("unknown relation").with_detail(e.to_string()))?),
        None => None,
    };
    let store = s.read()?;
    let node = find_node(&store, &id)?.clone();
    let neighbors = store
        .neighbors(&node.id, relation)
        .into_iter()
        .map(|(e, n)| Neighbor {
            edge: e.clone(),
            node: n.clone(),
        })
        .collect();
    Ok(Json(NeighborsResponse { node, neighbors }))
}

#[derive(Debug, Deserialize, Serialize)]
pub struct QasRequest {
    pub question: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    3
}

/// Model mentions first, then graph-vocabulary matches not already found.
struct QuestionExtractor<'a> {
    model: Option<&'a Hainex>,
    vocabulary: VocabularyExtractor,
}

impl EntityExtractor for QuestionExtractor<'_> {
    fn extract_entities(&self, text: &str) -> Result<Vec<Entity>, AppError> {
        let mut out = match self.model {
            Some(m) => m.extract_entities(text)?,
            None => vec![],
        };
        for e in self.vocabulary.extract_entities(text)? {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        Ok(out)
    }
}

async fn qas(State(s): State<AppState>, ApiJson(req): ApiJson<QasRequest>) -> Result<Json<iskg_core::apps::Answer>, ApiError> {
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question is empty"));
    }
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let state = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        let store = state.read()?;
        let extractor = QuestionExtractor {
            model: state.model.as_deref(),
            vocabulary: VocabularyExtractor::from_store(&store),
        };
        answer(&store, &req.question, req.k, &extractor, &state.keywords)
            .map_err(|e| ApiError::bad_request(e.to_string()))
    })
    .await
    .map_err(ApiError::internal)??;
    if result.status == AnswerStatus::Refused {
        return Err(ApiError::new(ErrorCode::OutOfScope, OUT_OF_SCOPE_MESSAGE).with_detail(result.question));
    }
    Ok(Json(result))
}

/// A path with its node texts and a one-line rendering.
#[derive(Debug, Deserialize, Serialize)]
pub struct PathView {
    #[serde(flatten)]
    pub path: PropagationPath,
    pub texts: Vec<String>,
    pub rendered: String,
}

impl PathView {
    fn new(path: PropagationPath, store: &GraphStore) -> Self {
        Self {
            texts: path.texts(store).into_iter().map(str::to_string).collect(),
            rendered: path.render(store),
            path,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct TraceQuery {
    pub node: String,
    pub depth: Option<usize>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct TraceResponse {
    pub node: IskNode,
    pub paths: Vec<PathView>,
}

async fn trace(State(s): State<AppState>, ApiQuery(q): ApiQuery<TraceQuery>) -> Result<Json<TraceResponse>, ApiError> {
    let store = s.read()?;
    let node = find_node(&store, &q.node)?.clone();
    let paths = trace_back(&store, &node.id, q.depth.unwrap_or(DEFAULT_TRACE_DEPTH))
        .map_err(|e| ApiError::not_found(e.to_string()))?;
    let paths = paths.into_iter().map(|p| PathView::new(p, &store)).collect();
    Ok(Json(TraceResponse { node, paths }))
}

#[derive(Debug, Default, Deserialize)]
pub struct InferredQuery {
    /// Only paths through this node (id or text).
    pub node: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct InferredResponse {
    pub paths: Vec<PathView>,
}

async fn inferred(State(s): State<AppState>, ApiQuery(q): ApiQuery<InferredQuery>) -> Result<Json<InferredResponse>, ApiError> {
    let store = s.read()?;
    let focus = match q.node.as_deref().filter(|n| !n.is_empty()) {
        Some(n) => Some(find_node(&store, n)?.id.clone()),
        None => None,
    };
    let paths = infer_paths(&store)
        .into_iter()
        .filter(|p| focus.as_ref().map_or(true, |f| p.nodes.contains(f)))
        .map(|p| PathView::new(p, &store))
        .collect();
    Ok(Json(InferredResponse { paths }))
}

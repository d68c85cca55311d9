//! HTTP API: upload an image to create a session holding its activation trace,
//! then query interpretability maps over that trace. Also serves the static
//! model overview, the knowledge graph, its layout, and the web UI bundle.

pub mod model_graph;

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lru::LruCache;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use vitprobe::graphlayout::{self, LayoutParams, LayoutReport, DEFAULT_ITERATIONS};
use vitprobe::ingest::{self, RasterImage};
use vitprobe::interpret::{self, sig9_list};
use vitprobe::model::forward;
use vitprobe::weights_io;
use vitprobe::{ActivationTrace, HeatGrid, ViTConfig, ViTWeights};

pub const DEFAULT_CAPACITY: usize = 32;
pub const DEFAULT_PORT: u16 = 8080;
const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;
const MAX_LAYOUT_ITERATIONS: usize = 10_000;

/// Weights plus the class names shown to clients.
pub struct Model {
    pub weights: ViTWeights,
    pub labels: Vec<String>,
}

impl Model {
    pub fn new(weights: ViTWeights, labels: Vec<String>) -> vitprobe::Result<Self> {
        if labels.len() != weights.config.n_classes {
            return Err(vitprobe::Error::InvalidArgument(format!(
                "{} labels for {} classes",
                labels.len(),
                weights.config.n_classes
            )));
        }
        Ok(Self { weights, labels })
    }

    /// Loads a manifest and its `.bin` sibling.
    pub fn load(manifest: &Path) -> vitprobe::Result<Self> {
        let labels = weights_io::read_manifest(manifest)?.class_labels();
        let weights = weights_io::load_weights(manifest, &weights_io::blob_path_for(manifest))?;
        Self::new(weights, labels)
    }
}

pub struct Session {
    pub id: String,
    pub created_at: u64,
    pub trace: ActivationTrace,
    pub image: RasterImage,
}

pub struct AppState {
    model: Option<Arc<Model>>,
    sessions: Mutex<LruCache<String, Arc<Session>>>,
    capacity: usize,
}

impl AppState {
    pub fn new(model: Option<Model>, capacity: usize) -> Arc<Self> {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        Arc::new(Self {
            model: model.map(Arc::new),
            sessions: Mutex::new(LruCache::new(cap)),
            capacity: cap.get(),
        })
    }

    fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model.clone().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model weights are loaded")
        })
    }

    fn config(&self) -> ViTConfig {
        self.model.as_ref().map_or_else(ViTConfig::default, |m| m.weights.config)
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }

    fn insert(&self, session: Session) -> Arc<Session> {
        let session = Arc::new(session);
        self.sessions
            .lock()
            .expect("session table poisoned")
            .put(session.id.clone(), session.clone());
        session
    }
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<vitprobe::Error> for ApiError {
    fn from(e: vitprobe::Error) -> Self {
        use vitprobe::Error as E;
        let status = match &e {
            E::OutOfRange { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            E::ImageFormat(_) | E::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        (self.status, body).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    created_at: u64,
    image_width: usize,
    image_height: usize,
    predicted_class: usize,
    predicted_label: String,
    #[serde(serialize_with = "sig9_list")]
    probs: Vec<f32>,
    labels: Vec<String>,
}

fn summary(s: &Session, model: &Model) -> SessionSummary {
    let predicted = s.trace.predicted_class();
    SessionSummary {
        session_id: s.id.clone(),
        created_at: s.created_at,
        image_width: s.image.width(),
        image_height: s.image.height(),
        predicted_class: predicted,
        predicted_label: model.labels[predicted].clone(),
        probs: s.trace.probs().data().to_vec(),
        labels: model.labels.clone(),
    }
}

fn new_session_id() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
struct Base64Upload {
    image_base64: String,
}

/// Image bytes from a multipart field named `image`, a JSON body
/// `{"image_base64": ...}`, or the raw request body.
async fn upload_bytes(req: Request) -> ApiResult<Bytes> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
        {
            if field.name() == Some("image") {
                return field
                    .bytes()
                    .await
                    .map_err(|e| ApiError::bad_request(e.body_text()));
            }
        }
        return Err(ApiError::bad_request("multipart body has no `image` field"));
    }
    let body = Bytes::from_request(req, &())
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?;
    if content_type.starts_with("application/json") {
        let upload: Base64Upload = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request(format!("invalid JSON upload: {e}")))?;
        // Accept data URLs as produced by browsers.
        let encoded = match upload.image_base64.split_once(";base64,") {
            Some((_, data)) => data,
            None => upload.image_base64.as_str(),
        };
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(encoded.trim())
            .map_err(|e| ApiError::bad_request(format!("invalid base64 image: {e}")))?;
        return Ok(decoded.into());
    }
    Ok(body)
}

fn run_model(model: &Model, bytes: &[u8]) -> ApiResult<Session> {
    let image = RasterImage::decode(bytes)?;
    let c = &model.weights.config;
    let input = ingest::preprocess_to(&image, c.image_h, c.image_w);
    let trace = forward(&input, &model.weights)?;
    Ok(Session {
        id: new_session_id(),
        created_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        trace,
        image,
    })
}

async fn create_session(State(state): State<Shared>, req: Request) -> ApiResult<Json<SessionSummary>> {
    let model = state.model()?;
    let bytes = upload_bytes(req).await?;
    let worker_model = model.clone();
    let session = tokio::task::spawn_blocking(move || run_model(&worker_model, &bytes))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let session = state.insert(session);
    Ok(Json(summary(&session, &model)))
}

async fn get_session(
    State(state): State<Shared>,
    axum::extract::Path(id): axum::extract::Path<String>,
) -> ApiResult<Json<SessionSummary>> {
    let model = state.model()?;
    let s = state.session(&id)?;
    Ok(Json(summary(&s, &model)))
}

#[derive(Deserialize)]
struct LayerRefQuery {
    layer: usize,
    #[serde(rename = "ref", default)]
    reference: usize,
}

#[derive(Deserialize)]
struct AttentionQuery {
    layer: usize,
    head: usize,
    #[serde(rename = "ref", default)]
    reference: usize,
}

#[derive(Deserialize)]
struct RefQuery {
    #[serde(rename = "ref", default)]
    reference: usize,
}

#[derive(Deserialize)]
struct ChannelQuery {
    layer: usize,
    channel: usize,
}

#[derive(Deserialize)]
struct LayoutQuery {
    #[serde(default)]
    seed: u64,
    iterations: Option<usize>,
}

type SessionPath = axum::extract::Path<String>;

async fn similarity(
    State(state): State<Shared>,
    axum::extract::Path(id): SessionPath,
    q: Result<Query<LayerRefQuery>, QueryRejection>,
) -> ApiResult<Json<HeatGrid>> {
    let Query(q) = q?;
    let s = state.session(&id)?;
    Ok(Json(interpret::similarity_map(&s.trace, q.layer, q.reference)?))
}

async fn attention(
    State(state): State<Shared>,
    axum::extract::Path(id): SessionPath,
    q: Result<Query<AttentionQuery>, QueryRejection>,
) -> ApiResult<Json<HeatGrid>> {
    let Query(q) = q?;
    let s = state.session(&id)?;
    Ok(Json(interpret::attention_map(&s.trace, q.layer, q.head, q.reference)?))
}

async fn channel(
    State(state): State<Shared>,
    axum::extract::Path(id): SessionPath,
    q: Result<Query<ChannelQuery>, QueryRejection>,
) -> ApiResult<Json<HeatGrid>> {
    let Query(q) = q?;
    let s = state.session(&id)?;
    Ok(Json(interpret::channel_grid(&s.trace, q.layer, q.channel)?))
}

#[derive(Serialize)]
struct ProbeResponse {
    ref_index: usize,
    predicted_class: usize,
    predicted_label: String,
    #[serde(serialize_with = "sig9_list")]
    logits: Vec<f32>,
    #[serde(serialize_with = "sig9_list")]
    probs: Vec<f32>,
}

async fn probe(
    State(state): State<Shared>,
    axum::extract::Path(id): SessionPath,
    q: Result<Query<RefQuery>, QueryRejection>,
) -> ApiResult<Json<ProbeResponse>> {
    let Query(q) = q?;
    let model = state.model()?;
    let s = state.session(&id)?;
    let p = interpret::patch_probe(&s.trace, &model.weights, q.reference)?;
    let predicted = argmax(&p.probs);
    Ok(Json(ProbeResponse {
        ref_index: p.ref_index,
        predicted_class: predicted,
        predicted_label: model.labels[predicted].clone(),
        logits: p.logits,
        probs: p.probs,
    }))
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

async fn source_image(
    State(state): State<Shared>,
    axum::extract::Path(id): SessionPath,
) -> ApiResult<Response> {
    let s = state.session(&id)?;
    let png = s.image.to_png()?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn positional(
    State(state): State<Shared>,
    q: Result<Query<RefQuery>, QueryRejection>,
) -> ApiResult<Json<HeatGrid>> {
    let Query(q) = q?;
    let model = state.model()?;
    Ok(Json(interpret::positional_similarity(&model.weights, q.reference)?))
}

async fn model_graph(State(state): State<Shared>) -> Json<model_graph::ModelGraph> {
    Json(model_graph::model_graph(&state.config()))
}

async fn knowledge_graph() -> Json<graphlayout::GraphSpec> {
    Json(graphlayout::knowledge_graph())
}

async fn layout(q: Result<Query<LayoutQuery>, QueryRejection>) -> ApiResult<Json<LayoutReport>> {
    let Query(q) = q?;
    let iterations = q.iterations.unwrap_or(DEFAULT_ITERATIONS);
    if iterations == 0 || iterations > MAX_LAYOUT_ITERATIONS {
        return Err(vitprobe::Error::OutOfRange {
            what: "iterations",
            index: iterations,
            min: 1,
            max: MAX_LAYOUT_ITERATIONS,
        }
        .into());
    }
    let graph = graphlayout::knowledge_graph();
    let state = graphlayout::layout(&graph, q.seed, iterations, &LayoutParams::default())?;
    Ok(Json(LayoutReport::new(&graph, q.seed, &state)))
}

#[derive(Serialize)]
struct Health {
    weights_loaded: bool,
    config: ViTConfig,
    sessions: usize,
    capacity: usize,
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    let sessions = state.sessions.lock().expect("session table poisoned").len();
    Json(Health {
        weights_loaded: state.model.is_some(),
        config: state.config(),
        sessions,
        capacity: state.capacity,
    })
}

/// All `/api/v1` routes, plus static files from `static_dir` for any other path.
pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/similarity", get(similarity))
        .route("/session/{id}/attention", get(attention))
        .route("/session/{id}/probe", get(probe))
        .route("/session/{id}/channel", get(channel))
        .route("/session/{id}/image", get(source_image))
        .route("/positional", get(positional))
        .route("/model-graph", get(model_graph))
        .route("/knowledge-graph", get(knowledge_graph))
        .route("/layout", get(layout));
    let app = Router::new()
        .nest("/api/v1", api)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub struct ServeOptions {
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
}

pub async fn serve(state: Shared, opts: ServeOptions) -> std::io::Result<()> {
    let app = router(state, opts.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Runs [`serve`] on a fresh multi-threaded runtime until Ctrl-C.
pub fn serve_blocking(state: Shared, opts: ServeOptions) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state, opts))
}

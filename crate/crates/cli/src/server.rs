//! Read-only HTTP service over one trained scene.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use semsplat::camera::Camera;
use semsplat::pipeline::Prompt;
use semsplat::query::{ScoreStats, DEFAULT_THRESHOLD};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::assets::{query_images, AssetPaths, SceneAssets};

pub const MIN_SIDE: usize = 16;
pub const MAX_SIDE: usize = 2048;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    pub paths: AssetPaths,
    pub max_concurrency: usize,
    /// Default render resolution; `None` keeps the scene camera's.
    pub resolution: Option<(usize, usize)>,
}

pub struct AppState {
    pub assets: SceneAssets,
    pub camera: Camera<f64>,
    /// One permit per request allowed to render at a time.
    pub limiter: Arc<Semaphore>,
    pub max_concurrency: usize,
}

impl AppState {
    pub fn new(assets: SceneAssets, resolution: Option<(usize, usize)>, max_concurrency: usize) -> Self {
        let camera = assets.default_camera(resolution);
        Self {
            assets,
            camera,
            limiter: Arc::new(Semaphore::new(max_concurrency)),
            max_concurrency,
        }
    }
}

/// An error body: message, offending request field and prompt suggestions.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub suggestions: Vec<String>,
}

impl ApiError {
    fn bad(field: &str, msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: msg.into(),
            field: Some(field.to_string()),
            suggestions: Vec::new(),
        }
    }

    fn internal(msg: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: msg.to_string(),
            field: None,
            suggestions: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<semsplat::Error> for ApiError {
    fn from(e: semsplat::Error) -> Self {
        match e {
            semsplat::Error::UnknownPrompt { prompt, suggestions } => Self {
                status: StatusCode::NOT_FOUND,
                error: format!("unknown prompt {prompt:?}"),
                field: Some("prompt".into()),
                suggestions,
            },
            other => Self::internal(other),
        }
    }
}

/// Look-at camera override.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov: f64,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

fn default_up() -> [f64; 3] {
    [0.0, -1.0, 0.0]
}

fn default_fov() -> f64 {
    50.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub time: f64,
    pub camera: Option<CameraSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub prompt: Option<String>,
    pub embedding: Option<Vec<f64>>,
    /// Name echoed back for embedding queries.
    pub label: Option<String>,
    pub time: f64,
    pub threshold: Option<f64>,
    pub camera: Option<CameraSpec>,
    /// Include the raw per-pixel scores so clients can re-threshold.
    #[serde(default = "yes")]
    pub include_scores: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub prompt: String,
    pub threshold: f64,
    pub time: f64,
    pub width: usize,
    pub height: usize,
    pub stats: ScoreStats,
    /// Base64 PNG, blue to red over [0, 1].
    pub heatmap_png: String,
    /// Base64 1-bit PNG of score ≥ threshold.
    pub mask_png: String,
    /// Row-major relevancy scores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub frames: usize,
    pub timestamps: Vec<f64>,
    pub time_range: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub prompts: Vec<String>,
    pub classes: Vec<String>,
    pub default_threshold: f64,
    pub max_concurrency: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/meta", get(meta))
        .route("/render", post(render))
        .route("/query", post(query))
        .with_state(state)
}

async fn meta(State(s): State<Arc<AppState>>) -> Json<Meta> {
    let a = &s.assets;
    Json(Meta {
        name: a.manifest.name.clone(),
        frames: a.manifest.frames.len(),
        timestamps: a.timestamps.clone(),
        time_range: [0.0, 1.0],
        width: s.camera.width,
        height: s.camera.height,
        feature_dim: a.manifest.feature_dim,
        embedding_dim: a.lexicon.dim(),
        prompts: a.lexicon.prompts.keys().cloned().collect(),
        classes: a.manifest.class_names.clone(),
        default_threshold: DEFAULT_THRESHOLD,
        max_concurrency: s.max_concurrency,
    })
}

/// Parses a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let msg = e.inner().to_string();
        let mut field = e.path().to_string();
        if field == "." {
            // serde reports a missing field at its parent
            field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field"))
                .unwrap_or("body")
                .to_string();
        }
        ApiError::bad(&field, msg)
    })
}

fn check_time(time: f64) -> Result<(), ApiError> {
    if !(0.0..=1.0).contains(&time) {
        return Err(ApiError::bad("time", format!("time must be in [0, 1], got {time}")));
    }
    Ok(())
}

fn resolve_camera(state: &AppState, spec: &Option<CameraSpec>) -> Result<Camera<f64>, ApiError> {
    let Some(c) = spec else {
        return Ok(state.camera.clone());
    };
    let width = c.width.unwrap_or(state.camera.width);
    let height = c.height.unwrap_or(state.camera.height);
    for (name, v) in [("camera.width", width), ("camera.height", height)] {
        if !(MIN_SIDE..=MAX_SIDE).contains(&v) {
            return Err(ApiError::bad(
                name,
                format!("must be in [{MIN_SIDE}, {MAX_SIDE}], got {v}"),
            ));
        }
    }
    if !(c.fov > 0.0 && c.fov < 180.0) {
        return Err(ApiError::bad(
            "camera.fov",
            format!("fov must be in (0, 180) degrees, got {}", c.fov),
        ));
    }
    for (name, v) in [("camera.eye", c.eye), ("camera.target", c.target), ("camera.up", c.up)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ApiError::bad(name, "components must be finite"));
        }
    }
    Camera::look_at(c.eye, c.target, c.up, c.fov, width, height).map_err(|e| ApiError::bad("camera", e.to_string()))
}

/// Runs `work` on the blocking pool while holding a concurrency permit.
async fn limited<T: Send + 'static>(
    state: &Arc<AppState>,
    work: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let permit = state.limiter.clone().try_acquire_owned().map_err(|_| ApiError {
        status: StatusCode::TOO_MANY_REQUESTS,
        error: format!("more than {} requests in flight", state.max_concurrency),
        field: None,
        suggestions: Vec::new(),
    })?;
    let s = state.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        work(&s)
    })
    .await
    .map_err(ApiError::internal)?
}

async fn render(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_body(&body)?;
    check_time(req.time)?;
    let camera = resolve_camera(&s, &req.camera)?;
    let png = limited(&s, move |st| {
        st.assets.render_png(&camera, req.time).map_err(ApiError::internal)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn query(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let req: QueryRequest = parse_body(&body)?;
    check_time(req.time)?;
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::bad(
            "threshold",
            format!("threshold must be in [0, 1], got {threshold}"),
        ));
    }
    let prompt = match (req.prompt, req.embedding) {
        (Some(p), None) => Prompt::Text(p),
        (None, Some(values)) => {
            let dim = s.assets.lexicon.dim();
            if values.len() != dim {
                return Err(ApiError::bad(
                    "embedding",
                    format!("expected {dim} values, got {}", values.len()),
                ));
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(ApiError::bad("embedding", "must be finite and nonzero"));
            }
            Prompt::Embedding {
                label: req.label.unwrap_or_else(|| "embedding".into()),
                values,
            }
        }
        (Some(_), Some(_)) => return Err(ApiError::bad("prompt", "give either prompt or embedding, not both")),
        (None, None) => return Err(ApiError::bad("prompt", "one of prompt or embedding is required")),
    };
    if let Prompt::Text(p) = &prompt {
        // unknown prompts are a client error, answered before any rendering
        s.assets.lexicon.resolve(p)?;
    }
    let camera = resolve_camera(&s, &req.camera)?;
    let time = req.time;
    let include = req.include_scores;
    let resp = limited(&s, move |st| {
        let q = st.assets.query(&camera, time, &prompt, threshold)?;
        let (mask, heat) = query_images(&q).map_err(ApiError::internal)?;
        Ok(QueryResponse {
            prompt: q.prompt.clone(),
            threshold,
            time,
            width: q.width,
            height: q.height,
            stats: q.score_stats(),
            heatmap_png: STANDARD.encode(heat),
            mask_png: STANDARD.encode(mask),
            scores: include.then(|| q.relevancy.clone()),
        })
    })
    .await?;
    Ok(Json(resp))
}

/// Loads the scene, then listens until the process is stopped.
pub async fn serve(config: ServeConfig) -> anyhow::Result<()> {
    if config.max_concurrency == 0 {
        anyhow::bail!("max concurrency must be at least 1");
    }
    let assets = SceneAssets::load(&config.paths)?;
    let state = Arc::new(AppState::new(assets, config.resolution, config.max_concurrency));
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

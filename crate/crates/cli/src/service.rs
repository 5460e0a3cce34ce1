//! HTTP query service over a single trained project.
//!
//! The scene snapshot is immutable. Renders and encoded PNGs are cached in
//! concurrent maps; duplicate computation under contention is harmless since
//! every output is deterministic.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use dashmap::DashMap;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use semsplat::camera::CameraView;
use semsplat::features::{decode_temb, read_temb, FeatureError};
use semsplat::query::{argmax_point, cosine_heatmap, overlay, threshold_mask, BinaryMask, OverlaySource, QueryError, DEFAULT_TAU};
use semsplat::raster::{render, RenderConfig, RenderOutput};
use semsplat::scene::GaussianSet;
use semsplat::TextEmbedding;

use crate::commands::{render_image, RenderMode};
use crate::project::LoadedScene;

/// Environment variable holding the encoder bridge base URL.
pub const BRIDGE_ENV: &str = "SEMSPLAT_BRIDGE_URL";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown view {0:?}")]
    UnknownView(String),
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
    #[error("no refined mask stored for view {view:?} and prompt {prompt:?}")]
    NoRefinedMask { view: String, prompt: String },
    #[error("embedding dim {found} does not match scene feature dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no text embedder configured; set {BRIDGE_ENV} or upload a TEMB file")]
    NoEmbedder,
    #[error("encoder bridge failed: {0}")]
    Bridge(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownView(_) | ApiError::UnknownPrompt(_) | ApiError::NoRefinedMask { .. } => {
                StatusCode::NOT_FOUND
            }
            ApiError::DimMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NoEmbedder => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Bridge(_) => StatusCode::BAD_GATEWAY,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::DimMismatch { feature, embedding } => ApiError::DimMismatch {
                expected: feature,
                found: embedding,
            },
            QueryError::InvalidThreshold(_) | QueryError::ShapeMismatch | QueryError::Image(_) => {
                ApiError::BadRequest(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewInfo {
    pub view_id: String,
    pub split: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptInfo {
    pub prompt_id: String,
    pub label: String,
    pub dim: usize,
}

/// Stable prompt id: hex prefix of SHA-256 over the label and f32 payload.
pub fn prompt_id(emb: &TextEmbedding) -> String {
    let mut h = Sha256::new();
    h.update(emb.label.as_bytes());
    h.update([0u8]);
    for v in &emb.vector {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct Inner {
    set: GaussianSet,
    render: RenderConfig,
    views: BTreeMap<String, (CameraView, &'static str)>,
    prompts: DashMap<String, TextEmbedding>,
    renders: DashMap<String, Arc<RenderOutput>>,
    pngs: DashMap<String, Bytes>,
    refined: DashMap<(String, String, String), BinaryMask>,
    bridge_url: Option<String>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(set: GaussianSet, render: RenderConfig, cameras: Vec<(CameraView, &'static str)>) -> Self {
        let views = cameras.into_iter().map(|(c, s)| (c.view_id.clone(), (c, s))).collect();
        Self(Arc::new(Inner {
            set,
            render,
            views,
            prompts: DashMap::new(),
            renders: DashMap::new(),
            pngs: DashMap::new(),
            refined: DashMap::new(),
            bridge_url: None,
        }))
    }

    /// Must be called before the state is shared.
    pub fn with_bridge(mut self, url: Option<String>) -> Self {
        Arc::get_mut(&mut self.0).expect("state not yet shared").bridge_url =
            url.map(|u| u.trim_end_matches('/').to_string());
        self
    }

    /// Opens the project checkpoint and preloads every `prompts/*.temb`.
    pub fn load(project: &Path, checkpoint: Option<&Path>) -> anyhow::Result<Self> {
        let scene = LoadedScene::open(project, checkpoint, None)?;
        let cameras = scene.cameras()?;
        let state = Self::new(scene.set, scene.config.render.clone(), cameras)
            .with_bridge(std::env::var(BRIDGE_ENV).ok().filter(|s| !s.is_empty()));
        let mut files: Vec<PathBuf> = match std::fs::read_dir(scene.layout.prompts_dir()) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(_) => Vec::new(),
        };
        files.retain(|p| p.extension().is_some_and(|e| e == "temb"));
        files.sort();
        for path in files {
            match read_temb(&path).map_err(ApiError::from).and_then(|e| state.add_prompt(e)) {
                Ok(info) => info!("prompt {} = {:?}", info.prompt_id, info.label),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(state)
    }

    pub fn add_prompt(&self, emb: TextEmbedding) -> ApiResult<PromptInfo> {
        if emb.dim() != self.0.set.feature_dim {
            return Err(ApiError::DimMismatch {
                expected: self.0.set.feature_dim,
                found: emb.dim(),
            });
        }
        if !emb.is_unit() {
            warn!("prompt {:?} has norm {:.6}", emb.label, emb.norm());
        }
        let info = PromptInfo {
            prompt_id: prompt_id(&emb),
            label: emb.label.clone(),
            dim: emb.dim(),
        };
        self.0.prompts.insert(info.prompt_id.clone(), emb);
        Ok(info)
    }

    pub fn prompts(&self) -> Vec<PromptInfo> {
        let mut out: Vec<PromptInfo> = self
            .0
            .prompts
            .iter()
            .map(|e| PromptInfo {
                prompt_id: e.key().clone(),
                label: e.value().label.clone(),
                dim: e.value().dim(),
            })
            .collect();
        out.sort_by(|a, b| (&a.label, &a.prompt_id).cmp(&(&b.label, &b.prompt_id)));
        out
    }

    fn camera(&self, view: &str) -> ApiResult<&CameraView> {
        self.0
            .views
            .get(view)
            .map(|(c, _)| c)
            .ok_or_else(|| ApiError::UnknownView(view.to_string()))
    }

    fn prompt(&self, id: &str) -> ApiResult<TextEmbedding> {
        self.0
            .prompts
            .get(id)
            .map(|e| e.value().clone())
            .ok_or_else(|| ApiError::UnknownPrompt(id.to_string()))
    }

    async fn rendered(&self, view: &str) -> ApiResult<Arc<RenderOutput>> {
        if let Some(r) = self.0.renders.get(view) {
            return Ok(r.clone());
        }
        let camera = self.camera(view)?.clone();
        let state = self.clone();
        let out = tokio::task::spawn_blocking(move || render(&state.0.set, &camera, &state.0.render))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let out = Arc::new(out);
        self.0.renders.insert(view.to_string(), out.clone());
        Ok(out)
    }

    /// Returns the cached PNG for `key`, computing it off the async runtime on a miss.
    async fn cached_png<F>(&self, key: String, make: F) -> ApiResult<Bytes>
    where
        F: FnOnce() -> ApiResult<Vec<u8>> + Send + 'static,
    {
        if let Some(b) = self.0.pngs.get(&key) {
            return Ok(b.clone());
        }
        let bytes = Bytes::from(
            tokio::task::spawn_blocking(make)
                .await
                .map_err(|e| ApiError::Internal(e.to_string()))??,
        );
        self.0.pngs.insert(key, bytes.clone());
        Ok(bytes)
    }
}

fn png_response(bytes: Bytes, extra: HeaderMap) -> Response {
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    resp.headers_mut().extend(extra);
    resp
}

fn header_value(s: &str) -> HeaderValue {
    HeaderValue::from_str(s).unwrap_or_else(|_| HeaderValue::from_static("invalid"))
}

fn encode(img: &semsplat::Image) -> ApiResult<Vec<u8>> {
    img.encode_png().map_err(|e| ApiError::Internal(e.to_string()))
}

async fn list_views(State(state): State<AppState>) -> Json<Vec<ViewInfo>> {
    Json(
        state
            .0
            .views
            .values()
            .map(|(c, split)| ViewInfo {
                view_id: c.view_id.clone(),
                split: split.to_string(),
                width: c.width,
                height: c.height,
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct RenderQuery {
    view: String,
    mode: Option<String>,
}

async fn render_view(State(state): State<AppState>, Query(q): Query<RenderQuery>) -> ApiResult<Response> {
    let mode_name = q.mode.as_deref().unwrap_or("rgb");
    let mode = RenderMode::parse(mode_name).ok_or_else(|| ApiError::BadRequest(format!("unknown mode {mode_name:?}")))?;
    let out = state.rendered(&q.view).await?;
    let key = format!("render/{}/{}", q.view, mode.name());
    let bytes = state
        .cached_png(key, move || {
            let img = render_image(&out, mode).map_err(|e| ApiError::Internal(e.to_string()))?;
            encode(&img)
        })
        .await?;
    Ok(png_response(bytes, HeaderMap::new()))
}

async fn list_prompts(State(state): State<AppState>) -> Json<Vec<PromptInfo>> {
    Json(state.prompts())
}

#[derive(Deserialize)]
struct PromptBody {
    label: String,
    embedding: Option<Vec<f64>>,
    text: Option<String>,
}

#[derive(Deserialize)]
struct BridgeEmbedding {
    label: String,
    embedding: Vec<f64>,
}

async fn embed_via_bridge(url: &str, text: &str) -> ApiResult<BridgeEmbedding> {
    let resp = reqwest::Client::new()
        .post(format!("{url}/embed"))
        .json(&serde_json::json!({ "text": text }))
        .send()
        .await
        .map_err(|e| ApiError::Bridge(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(ApiError::Bridge(format!("status {}", resp.status())));
    }
    resp.json().await.map_err(|e| ApiError::Bridge(e.to_string()))
}

/// Accepts a JSON body (`{label, embedding}` or `{label, text}`) or a raw TEMB upload.
async fn create_prompt(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    let emb = if content_type.starts_with("application/octet-stream") || body.starts_with(b"TEMB") {
        decode_temb(&body)?
    } else {
        let req: PromptBody =
            serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid prompt body: {e}")))?;
        match (req.embedding, req.text) {
            (Some(v), _) => embedding_from(&req.label, &v)?,
            (None, Some(text)) => {
                let url = state.0.bridge_url.as_deref().ok_or(ApiError::NoEmbedder)?;
                let got = embed_via_bridge(url, &text).await?;
                let label = if req.label.is_empty() { got.label } else { req.label };
                embedding_from(&label, &got.embedding)?
            }
            (None, None) => return Err(ApiError::BadRequest("prompt needs `embedding` or `text`".into())),
        }
    };
    let info = state.add_prompt(emb)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

fn embedding_from(label: &str, v: &[f64]) -> ApiResult<TextEmbedding> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(ApiError::BadRequest("embedding must be finite and non-zero".into()));
    }
    Ok(TextEmbedding::normalized(label, v))
}

impl From<FeatureError> for ApiError {
    fn from(e: FeatureError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

#[derive(Deserialize)]
struct HeatmapQuery {
    view: String,
    prompt: String,
}

async fn heatmap(State(state): State<AppState>, Query(q): Query<HeatmapQuery>) -> ApiResult<Response> {
    let camera = state.camera(&q.view)?.clone();
    let prompt = state.prompt(&q.prompt)?;
    let out = state.rendered(&q.view).await?;
    let heat = cosine_heatmap(&out.feature_map("render"), &prompt)?;
    let point = argmax_point(&heat, &camera.view_id)?;
    let key = format!("heatmap/{}/{}", q.view, q.prompt);
    let bytes = state
        .cached_png(key, move || encode(&overlay(&out.rgb.clamped(0.0, 1.0), OverlaySource::Heatmap(&heat))?))
        .await?;
    let mut extra = HeaderMap::new();
    extra.insert("x-argmax-x", header_value(&point.x.to_string()));
    extra.insert("x-argmax-y", header_value(&point.y.to_string()));
    extra.insert("x-argmax-score", header_value(&point.score.to_string()));
    Ok(png_response(bytes, extra))
}

#[derive(Deserialize)]
struct MaskQuery {
    view: String,
    prompt: String,
    tau: Option<f64>,
    format: Option<String>,
}

async fn mask(State(state): State<AppState>, Query(q): Query<MaskQuery>) -> ApiResult<Response> {
    let camera = state.camera(&q.view)?.clone();
    let prompt = state.prompt(&q.prompt)?;
    let tau = q.tau.unwrap_or(DEFAULT_TAU);
    let format = q.format.as_deref().unwrap_or("overlay");
    if !matches!(format, "overlay" | "mask" | "json") {
        return Err(ApiError::BadRequest(format!("unknown format {format:?}")));
    }
    let out = state.rendered(&q.view).await?;
    let heat = cosine_heatmap(&out.feature_map("render"), &prompt)?;
    let m = threshold_mask(&heat, tau)?;
    let doc = argmax_point(&heat, &camera.view_id)?.document(camera.width, camera.height);
    if format == "json" {
        return Ok(Json(doc).into_response());
    }
    let key = format!("mask/{}/{}/{:016x}/{format}", q.view, q.prompt, tau.to_bits());
    let overlay_wanted = format == "overlay";
    let bytes = state
        .cached_png(key, move || {
            if overlay_wanted {
                encode(&overlay(&out.rgb.clamped(0.0, 1.0), OverlaySource::Mask(&m))?)
            } else {
                Ok(m.encode_png()?)
            }
        })
        .await?;
    let mut extra = HeaderMap::new();
    let compact = serde_json::to_string(&doc).map_err(|e| ApiError::Internal(e.to_string()))?;
    extra.insert("x-point-prompt", header_value(&compact));
    Ok(png_response(bytes, extra))
}

#[derive(Deserialize)]
struct RefinedQuery {
    view: String,
    prompt: String,
    /// Refinement model name, so results from different models are stored separately.
    model: Option<String>,
}

impl RefinedQuery {
    fn key(&self) -> (String, String, String) {
        (
            self.view.clone(),
            self.prompt.clone(),
            self.model.clone().unwrap_or_else(|| "sam".into()),
        )
    }
}

async fn store_refined(State(state): State<AppState>, Query(q): Query<RefinedQuery>, body: Bytes) -> ApiResult<Response> {
    let camera = state.camera(&q.view)?;
    state.prompt(&q.prompt)?;
    let m = BinaryMask::decode_png(&body, camera.width, camera.height)?;
    let count = m.count();
    state.0.refined.insert(q.key(), m);
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "view": q.view, "prompt": q.prompt, "foreground_pixels": count })),
    )
        .into_response())
}

async fn refined_overlay(State(state): State<AppState>, Query(q): Query<RefinedQuery>) -> ApiResult<Response> {
    state.camera(&q.view)?;
    state.prompt(&q.prompt)?;
    let key = q.key();
    let m = state
        .0
        .refined
        .get(&key)
        .map(|m| m.value().clone())
        .ok_or_else(|| ApiError::NoRefinedMask {
            view: q.view.clone(),
            prompt: q.prompt.clone(),
        })?;
    let out = state.rendered(&q.view).await?;
    // Refined masks can be replaced, so this overlay is not cached.
    let bytes = tokio::task::spawn_blocking(move || encode(&overlay(&out.rgb.clamped(0.0, 1.0), OverlaySource::Mask(&m))?))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(png_response(Bytes::from(bytes), HeaderMap::new()))
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/views", get(list_views))
        .route("/api/render", get(render_view))
        .route("/api/prompts", get(list_prompts).post(create_prompt))
        .route("/api/heatmap", get(heatmap))
        .route("/api/mask", get(mask))
        .route("/api/refined_mask", get(refined_overlay).post(store_refined))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: AppState, bind: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

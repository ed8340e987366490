//! HTTP/JSON front end for the generation pipeline.
//!
//! Every stochastic endpoint takes a mandatory `seed` and echoes it, so the
//! same request against the same model snapshot yields the same bytes.
//! Handlers share one immutable [`Pipeline`] snapshot; the only mutation is
//! `POST /v1/admin/reload`, which swaps the snapshot atomically.

mod error;

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{FromRequest, Request, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use hiergen_core::{tensorize_box, InstanceMask, LayoutSequence, Rle};
use hiergen_train::config::PipelineOptions;
use hiergen_train::pipeline::{GenerateInput, ModelVersion, Pipeline, PipelinePaths};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody};

pub const ADDR_ENV: &str = "HIERGEN_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Listen address: the explicit flag, else `HIERGEN_ADDR`, else the default.
pub fn resolve_addr(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(ADDR_ENV).ok().filter(|a| !a.is_empty()))
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub text: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResponse {
    pub layout: LayoutSequence,
    pub truncated: bool,
    pub seed: u64,
    pub model_version: ModelVersion,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub text: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub layout: Option<LayoutSequence>,
    #[serde(default)]
    pub masks: Option<Vec<Rle>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub layout: LayoutSequence,
    pub masks: Vec<Rle>,
    /// Base64-encoded PNG.
    pub image: String,
    pub seed: u64,
    pub model_version: ModelVersion,
}

/// Image stage only: a layout plus optional masks (filled boxes otherwise).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub layout: LayoutSequence,
    #[serde(default)]
    pub masks: Option<Vec<Rle>>,
    #[serde(default)]
    pub text: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderResponse {
    pub image: String,
    pub seed: u64,
    pub model_version: ModelVersion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaResponse {
    pub classes: Vec<String>,
    pub grid: usize,
    pub model_version: ModelVersion,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReloadRequest {
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Shared server state: the current snapshot and where it came from.
pub struct AppState {
    model: RwLock<Option<Arc<Pipeline>>>,
    source: RwLock<Option<PathBuf>>,
    options: PipelineOptions,
}

impl AppState {
    pub fn empty(options: PipelineOptions) -> Self {
        AppState {
            model: RwLock::new(None),
            source: RwLock::new(None),
            options,
        }
    }

    pub fn with_pipeline(pipeline: Pipeline, source: Option<PathBuf>) -> Self {
        AppState {
            options: pipeline.options.clone(),
            model: RwLock::new(Some(Arc::new(pipeline))),
            source: RwLock::new(source),
        }
    }

    /// Loads `box.ckpt`, `shape.ckpt` (when present) and `image.ckpt` from `dir`.
    pub fn load_dir(dir: PathBuf, options: PipelineOptions) -> hiergen_train::Result<Self> {
        let p = Pipeline::load(&PipelinePaths::in_dir(&dir), options)?;
        Ok(AppState::with_pipeline(p, Some(dir)))
    }

    pub fn snapshot(&self) -> Option<Arc<Pipeline>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn current(&self) -> Result<Arc<Pipeline>, ApiError> {
        self.snapshot().ok_or_else(ApiError::not_loaded)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/meta", get(meta))
        .route("/v1/layout/sample", post(sample))
        .route("/v1/pipeline/generate", post(generate))
        .route("/v1/image/render", post(render))
        .route("/v1/admin/reload", post(reload))
        .with_state(state)
}

pub async fn serve(addr: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// JSON body whose decoding errors become 422 responses naming the field.
pub struct ApiJson<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::invalid(e.body_text(), None))?;
        decode(&bytes).map(ApiJson)
    }
}

fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        // a missing field is reported at its parent; name the field itself
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        ApiError::invalid(message, (path != ".").then_some(path))
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn png_base64(image: &hiergen_core::imageio::Image) -> Result<String, ApiError> {
    let png = image.to_png().map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn check_layout(p: &Pipeline, layout: &LayoutSequence) -> Result<(), ApiError> {
    layout.validate().map_err(|e| ApiError::from(e).under("layout"))?;
    if layout.class_names != p.classes() {
        return Err(ApiError::invalid(
            "class names differ from the loaded model",
            Some("layout.classes".into()),
        ));
    }
    Ok(())
}

fn decode_masks(rles: &[Rle]) -> Result<Vec<InstanceMask>, ApiError> {
    rles.iter()
        .enumerate()
        .map(|(i, r)| r.to_mask().map_err(|e| ApiError::from(e).under(&format!("masks[{i}]"))))
        .collect()
}

fn filled_boxes(p: &Pipeline, layout: &LayoutSequence) -> Result<Vec<InstanceMask>, ApiError> {
    let (g, l) = (p.grid(), p.classes().len());
    layout
        .boxes
        .iter()
        .map(|b| {
            let t = tensorize_box(b, g, g, l)?;
            Ok(InstanceMask::from_binary(g, g, &t.occupancy()))
        })
        .collect()
}

async fn meta(State(state): State<Arc<AppState>>) -> Result<Json<MetaResponse>, ApiError> {
    let p = state.current()?;
    Ok(Json(MetaResponse {
        classes: p.classes().to_vec(),
        grid: p.grid(),
        model_version: p.version().clone(),
    }))
}

async fn sample(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<SampleRequest>,
) -> Result<Json<SampleResponse>, ApiError> {
    let p = state.current()?;
    if req.text.trim().is_empty() {
        return Err(ApiError::invalid("text must be nonempty", Some("text".into())));
    }
    blocking(move || {
        let s = p.sample_layout(&req.text, req.seed)?;
        Ok(Json(SampleResponse {
            layout: s.layout,
            truncated: s.truncated,
            seed: req.seed,
            model_version: p.version().clone(),
        }))
    })
    .await
}

async fn generate(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let p = state.current()?;
    if let Some(l) = &req.layout {
        check_layout(&p, l)?;
    }
    let masks = req.masks.as_deref().map(decode_masks).transpose()?;
    let threshold = state.options.threshold;
    blocking(move || {
        let g = p.generate(&GenerateInput {
            text: req.text,
            seed: req.seed,
            layout: req.layout,
            masks,
        })?;
        Ok(Json(GenerateResponse {
            masks: g.masks.iter().map(|m| Rle::from_mask(m, threshold)).collect(),
            image: png_base64(&g.image)?,
            layout: g.layout,
            seed: g.seed,
            model_version: p.version().clone(),
        }))
    })
    .await
}

async fn render(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<RenderRequest>,
) -> Result<Json<RenderResponse>, ApiError> {
    let p = state.current()?;
    check_layout(&p, &req.layout)?;
    let masks = match &req.masks {
        Some(r) => {
            if r.len() != req.layout.len() {
                return Err(ApiError::invalid(
                    format!("{} masks for {} boxes", r.len(), req.layout.len()),
                    Some("masks".into()),
                ));
            }
            let m = decode_masks(r)?;
            if let Some(i) = m.iter().position(|m| m.height != p.grid() || m.width != p.grid()) {
                return Err(ApiError::invalid(
                    format!("mask must be {0}×{0}", p.grid()),
                    Some(format!("masks[{i}]")),
                ));
            }
            m
        }
        None => filled_boxes(&p, &req.layout)?,
    };
    blocking(move || {
        let text = req.text.as_deref().filter(|t| !t.trim().is_empty());
        let map = p.label_map(&req.layout, &masks)?;
        let image = p.render(&map, text, req.seed)?;
        Ok(Json(RenderResponse {
            image: png_base64(&image)?,
            seed: req.seed,
            model_version: p.version().clone(),
        }))
    })
    .await
}

async fn reload(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<MetaResponse>, ApiError> {
    let req: ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ReloadRequest::default()
    } else {
        decode(&body)?
    };
    let dir = match req.checkpoint_dir {
        Some(d) => d,
        None => state
            .source
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or_else(|| ApiError::invalid("no checkpoint directory configured", Some("checkpoint_dir".into())))?,
    };
    let options = state.options.clone();
    let loaded = {
        let dir = dir.clone();
        blocking(move || {
            Pipeline::load(&PipelinePaths::in_dir(&dir), options).map_err(|e| match e {
                hiergen_train::TrainError::Io(io) => {
                    ApiError::invalid(io.to_string(), Some("checkpoint_dir".into()))
                }
                other => other.into(),
            })
        })
        .await?
    };
    let meta = MetaResponse {
        classes: loaded.classes().to_vec(),
        grid: loaded.grid(),
        model_version: loaded.version().clone(),
    };
    *state.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(loaded));
    *state.source.write().unwrap_or_else(|e| e.into_inner()) = Some(dir);
    log::info!("reloaded model {}", meta.model_version.combined());
    Ok(Json(meta))
}

//! HTTP API behind the white-patch annotation UI.
//!
//! Illuminants are always measured server-side on the linear demosaiced image;
//! the client only sends a rectangle.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use nisp_core::imaging::io::{encode_png8, write_file_atomic};
use nisp_core::imaging::{
    estimate_illuminant_whitepatch, render_preview, render_with_illuminant, BayerImage, EncodedImage,
    LinearRgbImage, PatchRect, PREVIEW_PIPELINE_VERSION,
};
use nisp_core::train::{valid_id, AnnotationRecord, DatasetPaths};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tower_http::services::ServeDir;

use crate::commands::PREVIEW_TEXT_KEY;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    })
}

struct Decoded {
    raw: BayerImage,
    linear: LinearRgbImage,
    preview_png: Vec<u8>,
}

struct Inner {
    paths: DatasetPaths,
    clock: Clock,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    cache: Mutex<HashMap<String, Arc<Decoded>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(dataset: impl Into<PathBuf>, clock: Clock) -> Self {
        AppState(Arc::new(Inner {
            paths: DatasetPaths::new(dataset),
            clock,
            locks: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
        }))
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.0.locks.lock().unwrap().entry(id.to_string()).or_default().clone()
    }
}

/// API routes, plus static files from `static_dir` at `/` when given.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{id}/preview", get(preview))
        .route("/api/images/{id}/annotation", get(get_annotation).post(post_annotation))
        .route("/api/images/{id}/wb-preview", get(wb_preview))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::not_found("no such route".into()) }),
    }
}

/// Serves until the process is stopped.
pub async fn serve(dataset: PathBuf, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(AppState::new(dataset, system_clock()), static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("annotation server on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

// ---------- errors ----------

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn not_found(msg: String) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, body: json!({ "error": msg }) }
    }

    fn unprocessable(msg: &str, fields: Map<String, Value>) -> Self {
        ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, body: json!({ "error": msg, "fields": fields }) }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, body: json!({ "error": e.to_string() }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png_response(bytes: Vec<u8>, extra: Option<(&'static str, String)>) -> Response {
    let mut r = ([(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    if let Some((k, v)) = extra {
        if let Ok(v) = HeaderValue::from_str(&v) {
            r.headers_mut().insert(k, v);
        }
    }
    r
}

fn json_bytes_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

// ---------- images ----------

fn known_id(state: &AppState, id: &str) -> ApiResult<()> {
    if valid_id(id) && state.0.paths.raw(id).is_file() {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("unknown image `{id}`")))
    }
}

fn decoded(state: &AppState, id: &str) -> ApiResult<Arc<Decoded>> {
    known_id(state, id)?;
    if let Some(d) = state.0.cache.lock().unwrap().get(id) {
        return Ok(d.clone());
    }
    let raw = state.0.paths.load_raw(id).map_err(ApiError::internal)?;
    let (linear, display) = render_preview(&raw).map_err(ApiError::internal)?;
    let preview_png =
        encode_png8(&display, &[(PREVIEW_TEXT_KEY, PREVIEW_PIPELINE_VERSION)]).map_err(ApiError::internal)?;
    let d = Arc::new(Decoded { raw, linear, preview_png });
    state.0.cache.lock().unwrap().insert(id.to_string(), d.clone());
    Ok(d)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageListEntry {
    pub image_id: String,
    pub annotated: bool,
    pub thumbnail_url: String,
}

async fn list_images(State(state): State<AppState>) -> ApiResult<Json<Vec<ImageListEntry>>> {
    blocking(move || {
        let ids = state.0.paths.ids().map_err(ApiError::internal)?;
        Ok(Json(
            ids.into_iter()
                .filter(|id| valid_id(id))
                .map(|id| ImageListEntry {
                    annotated: state.0.paths.annotation(&id).is_file(),
                    thumbnail_url: format!("/api/images/{id}/preview"),
                    image_id: id,
                })
                .collect(),
        ))
    })
    .await
}

async fn preview(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let d = blocking(move || decoded(&state, &id)).await?;
    Ok(png_response(d.preview_png.clone(), None))
}

// ---------- rect validation ----------

/// Checks `x, y, w, h` (each a nonnegative integer) against the image.
fn validate_rect(v: &Value, width: usize, height: usize) -> ApiResult<PatchRect> {
    let mut fields = Map::new();
    let mut get = |k: &str| -> usize {
        match v.get(k).and_then(Value::as_u64) {
            Some(n) => n as usize,
            None => {
                fields.insert(k.into(), json!("required nonnegative integer"));
                0
            }
        }
    };
    let r = PatchRect { x: get("x"), y: get("y"), w: get("w"), h: get("h") };
    if fields.is_empty() {
        let m = PatchRect::MIN_SIDE;
        if r.w < m {
            fields.insert("w".into(), json!(format!("must be at least {m}")));
        }
        if r.h < m {
            fields.insert("h".into(), json!(format!("must be at least {m}")));
        }
        if r.x.saturating_add(r.w) > width {
            fields.insert("x".into(), json!(format!("x + w = {} exceeds image width {width}", r.x.saturating_add(r.w))));
        }
        if r.y.saturating_add(r.h) > height {
            fields.insert("y".into(), json!(format!("y + h = {} exceeds image height {height}", r.y.saturating_add(r.h))));
        }
    }
    if fields.is_empty() {
        Ok(r)
    } else {
        Err(ApiError::unprocessable("invalid rect", fields))
    }
}

fn query_rect(q: &HashMap<String, String>, width: usize, height: usize) -> ApiResult<PatchRect> {
    let Some(s) = q.get("rect") else {
        let mut f = Map::new();
        f.insert("rect".into(), json!("required as x,y,w,h"));
        return Err(ApiError::unprocessable("invalid rect", f));
    };
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let mut obj = Map::new();
    if parts.len() == 4 {
        for (k, p) in ["x", "y", "w", "h"].iter().zip(&parts) {
            if let Ok(n) = p.parse::<u64>() {
                obj.insert(k.to_string(), json!(n));
            }
        }
    } else {
        let mut f = Map::new();
        f.insert("rect".into(), json!(format!("expected x,y,w,h, got `{s}`")));
        return Err(ApiError::unprocessable("invalid rect", f));
    }
    validate_rect(&Value::Object(obj), width, height)
}

// ---------- annotations ----------

async fn get_annotation(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    known_id(&state, &id)?;
    let path = state.0.paths.annotation(&id);
    let bytes = blocking(move || match std::fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::not_found(format!("image `{id}` has no annotation")))
        }
        Err(e) => Err(ApiError::internal(format!("{}: {e}", path.display()))),
    })
    .await?;
    Ok(json_bytes_response(bytes))
}

async fn post_annotation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    known_id(&state, &id)?;
    let body: Value = serde_json::from_slice(&body).map_err(|e| {
        let mut f = Map::new();
        f.insert("body".into(), json!(e.to_string()));
        ApiError::unprocessable("body must be JSON", f)
    })?;
    let annotator = match body.get("annotator") {
        None | Some(Value::Null) => "anonymous".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            let mut f = Map::new();
            f.insert("annotator".into(), json!("must be a string"));
            return Err(ApiError::unprocessable("invalid annotation", f));
        }
    };
    let guard = state.lock_for(&id).lock_owned().await;
    let bytes = blocking(move || {
        let _guard = guard;
        let d = decoded(&state, &id)?;
        let rect_v = body.get("rect").cloned().unwrap_or(Value::Null);
        let rect = validate_rect(&rect_v, d.raw.width, d.raw.height)?;
        let illum = estimate_illuminant_whitepatch(&d.linear, rect).map_err(|e| {
            let mut f = Map::new();
            f.insert("rect".into(), json!(e.to_string()));
            ApiError::unprocessable("patch has no usable signal", f)
        })?;
        let prev = state.0.paths.load_annotation(&id).map_err(ApiError::internal)?;
        let record = AnnotationRecord {
            image_id: id.clone(),
            rect,
            illuminant: illum.rgb(),
            annotator,
            timestamp: (state.0.clock)(),
            version: prev.map_or(0, |p| p.version) + 1,
        };
        let bytes = record.encode();
        let path = state.0.paths.annotation(&id);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(format!("{}: {e}", dir.display())))?;
        }
        write_file_atomic(&path, &bytes).map_err(ApiError::internal)?;
        Ok(bytes)
    })
    .await?;
    Ok(json_bytes_response(bytes))
}

/// The preview re-balanced with the patch illuminant, so annotators can see
/// whether the patch neutralizes the cast. The illuminant is echoed in the
/// `x-illuminant` header.
async fn wb_preview(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let (png, illum) = blocking(move || {
        let d = decoded(&state, &id)?;
        let rect = query_rect(&q, d.raw.width, d.raw.height)?;
        let illum = estimate_illuminant_whitepatch(&d.linear, rect).map_err(|e| {
            let mut f = Map::new();
            f.insert("rect".into(), json!(e.to_string()));
            ApiError::unprocessable("patch has no usable signal", f)
        })?;
        let img: EncodedImage = render_with_illuminant(&d.linear, &illum, &d.raw.meta.ccm).map_err(ApiError::internal)?;
        let png = encode_png8(&img, &[(PREVIEW_TEXT_KEY, PREVIEW_PIPELINE_VERSION)]).map_err(ApiError::internal)?;
        Ok((png, illum.rgb()))
    })
    .await?;
    let header = format!("{},{},{}", illum[0], illum[1], illum[2]);
    Ok(png_response(png, Some(("x-illuminant", header))))
}

//! HTTP render and scenario-editing service over a fused scene.
//!
//! Renders run against an immutable snapshot captured at request time;
//! trajectory updates build a new snapshot and swap it in atomically, one
//! update at a time.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use autosplat_core::fusion::FusedScene;
use autosplat_core::scenario::{render_frame, validate_edits, ScenarioEdit};
use autosplat_core::CoreError;
use autosplat_scene::{CameraView, Intrinsics, SceneBundle};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use log::info;
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

/// Width of renders when a request names no size.
pub const PREVIEW_WIDTH: u32 = 320;

/// Scene state seen by one request.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub fused: FusedScene,
    /// Persistent trajectory edits, applied before each request's own edits.
    pub edits: Vec<ScenarioEdit>,
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    bundle: Arc<SceneBundle>,
    update: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(fused: FusedScene, bundle: SceneBundle) -> Arc<AppState> {
        Arc::new(AppState {
            snapshot: RwLock::new(Arc::new(Snapshot { fused, edits: Vec::new() })),
            bundle: Arc::new(bundle),
            update: tokio::sync::Mutex::new(()),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    fn replace(&self, s: Snapshot) {
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(s);
    }
}

/// Error body `{code, message}` with its status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> ApiError {
        match e {
            CoreError::UnknownObject { .. } => ApiError::new(StatusCode::NOT_FOUND, "unknown_object", e.to_string()),
            CoreError::FrameOutOfRange { .. } => ApiError::new(StatusCode::NOT_FOUND, "unknown_frame", e.to_string()),
            CoreError::InvalidParameter(_) | CoreError::InvalidSize(_) | CoreError::Config(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

/// JSON body parsing: syntax errors are 400, shape errors are 422 with the
/// field path.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            ApiError::new(StatusCode::BAD_REQUEST, "malformed_json", inner.to_string())
        } else {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", format!("{path}: {inner}"))
        }
    })
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Camera override: intrinsics matrix and camera-to-world rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraOverride {
    #[serde(rename = "K", default)]
    pub k: Option<[[f64; 3]; 3]>,
    pub cam_to_world: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub frame_index: usize,
    #[serde(default)]
    pub camera: Option<CameraOverride>,
    #[serde(default)]
    pub edits: Vec<ScenarioEdit>,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
}

/// One keyframe of an object's trajectory edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryOffset {
    pub frame: usize,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

/// Output size for a request against a `native_w × native_h` view: the
/// preview width by default, the other side following the aspect ratio.
pub fn output_size(req_w: Option<u32>, req_h: Option<u32>, native_w: u32, native_h: u32) -> Result<(u32, u32), ApiError> {
    let aspect = native_h as f64 / native_w as f64;
    let (w, h) = match (req_w, req_h) {
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) => (w, ((w as f64 * aspect).round() as u32).max(1)),
        (None, Some(h)) => (((h as f64 / aspect).round() as u32).max(1), h),
        (None, None) => {
            let w = PREVIEW_WIDTH.min(native_w);
            (w, ((w as f64 * aspect).round() as u32).max(1))
        }
    };
    if w == 0 || h == 0 || w > native_w || h > native_h {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            format!("size {w}x{h} must be positive and within the loaded resolution {native_w}x{native_h}"),
        ));
    }
    Ok((w, h))
}

fn override_camera(base: &CameraView, o: &CameraOverride) -> Result<CameraView, ApiError> {
    let intrinsics = match o.k {
        Some(k) => Intrinsics { fx: k[0][0], fy: k[1][1], cx: k[0][2], cy: k[1][2] },
        None => base.intrinsics,
    };
    let m = Matrix4::from_fn(|r, c| o.cam_to_world[r][c]);
    CameraView::new(intrinsics, m, base.width, base.height, base.frame_index)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", format!("camera: {e}")))
}

/// Renders a request against a snapshot; shared by the HTTP handler and tests.
pub fn render_request(snap: &Snapshot, req: &RenderRequest) -> Result<Vec<u8>, ApiError> {
    let count = snap.fused.frame_count();
    let base = snap
        .fused
        .cameras
        .get(req.frame_index)
        .ok_or_else(|| ApiError::from(CoreError::FrameOutOfRange { frame: req.frame_index, count }))?;
    let camera = req.camera.as_ref().map(|o| override_camera(base, o)).transpose()?;
    let native = camera.as_ref().unwrap_or(base);
    let size = output_size(req.width, req.height, native.width, native.height)?;
    let mut edits = snap.edits.clone();
    edits.extend(req.edits.iter().cloned());
    let image = render_frame(&snap.fused, req.frame_index, &edits, camera.as_ref(), Some(size))?;
    Ok(image.to_png_bytes())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn scene(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let snap = st.snapshot();
    let (lo, hi) = st.bundle.bounds();
    let frames: Vec<serde_json::Value> = st
        .bundle
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            json!({
                "index": i,
                "timestamp": f.timestamp,
                "split": f.split,
                "width": f.camera.width,
                "height": f.camera.height,
                "intrinsics": f.camera.intrinsics,
                "cam_to_world": autosplat_scene::camera::mat4_to_rows(&f.camera.cam_to_world),
            })
        })
        .collect();
    let objects: Vec<serde_json::Value> = snap
        .fused
        .objects
        .iter()
        .map(|o| {
            let track = snap.fused.track(o.id);
            json!({
                "id": o.id,
                "gaussians": o.cloud.len(),
                "bbox_dims": track.map(|t| [t.bbox_dims.x, t.bbox_dims.y, t.bbox_dims.z]),
                "frames": track.map(|t| t.poses.iter().enumerate().filter(|(_, p)| p.is_some()).map(|(i, _)| i).collect::<Vec<_>>()),
                "dynamic_appearance": o.appearance.is_some(),
            })
        })
        .collect();
    Json(json!({
        "frames": frames,
        "objects": objects,
        "bounds": {"min": [lo.x, lo.y, lo.z], "max": [hi.x, hi.y, hi.z]},
        "background_gaussians": snap.fused.background.len(),
        "preview_width": PREVIEW_WIDTH,
    }))
}

async fn frame_gt(State(st): State<Arc<AppState>>, Path(t): Path<usize>) -> Result<Response, ApiError> {
    let f = st
        .bundle
        .frames
        .get(t)
        .ok_or_else(|| ApiError::from(CoreError::FrameOutOfRange { frame: t, count: st.bundle.frames.len() }))?;
    Ok(png(f.image.to_png_bytes()))
}

async fn render(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_body(&body)?;
    let snap = st.snapshot();
    let bytes = tokio::task::spawn_blocking(move || render_request(&snap, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(png(bytes))
}

async fn put_trajectory(State(st): State<Arc<AppState>>, Path(id): Path<u16>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let offsets: Vec<TrajectoryOffset> = parse_body(&body)?;
    let _guard = st.update.lock().await;
    let snap = st.snapshot();
    snap.fused.object_index(id)?;
    let mut edits: Vec<ScenarioEdit> = snap
        .edits
        .iter()
        .filter(|e| !matches!(e, ScenarioEdit::ObjectOffset { object_id, .. } if *object_id == id))
        .cloned()
        .collect();
    edits.extend(offsets.iter().map(|o| ScenarioEdit::ObjectOffset {
        object_id: id,
        translation: o.translation,
        yaw: o.yaw,
        frames: Some(vec![o.frame]),
    }));
    validate_edits(&snap.fused, &edits)?;
    st.replace(Snapshot { fused: snap.fused.clone(), edits });
    info!("trajectory of object {id} set ({} keyframes)", offsets.len());
    Ok(Json(json!({"object_id": id, "keyframes": offsets.len()})))
}

async fn get_edits(State(st): State<Arc<AppState>>) -> Json<Vec<ScenarioEdit>> {
    Json(st.snapshot().edits.clone())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/scene", get(scene))
        .route("/api/frame/{t}/gt", get(frame_gt))
        .route("/api/render", post(render))
        .route("/api/objects/{id}/trajectory", put(put_trajectory))
        .route("/api/edits", get(get_edits))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub fn serve(fused: FusedScene, bundle: SceneBundle, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(AppState::new(fused, bundle))).await
    })
}

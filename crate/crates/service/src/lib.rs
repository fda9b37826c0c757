//! HTTP+JSON session service for interactive segmentation.
//!
//! Masks travel as run-length pairs `[start, length]` over the flattened z-major
//! voxel order; see [`mais_core::rle::rle_decode`].

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use mais_core::engine::{check_params, start_session, EngineConfig};
use mais_core::params::ParamStore;
use mais_core::rle::rle_encode;
use mais_core::volcore::{gen_synthetic, read_vvol, read_vvol_bytes};
use mais_core::{Click, Mask, Polarity, Volume};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

pub use error::{ApiError, ApiResult};
pub use session::{SessionRecord, Snapshot};

const MAX_UPLOAD: usize = 512 * 1024 * 1024;
const SYNTHETIC_PREFIX: &str = "synthetic:";

struct Inner {
    config: EngineConfig,
    params: ParamStore,
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
}

/// Shared service state. Parameters are loaded once and never change.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: EngineConfig, params: ParamStore, data_dir: impl Into<PathBuf>) -> mais_core::Result<Self> {
        check_params(&config, &params)?;
        Ok(Self(Arc::new(Inner { config, params, data_dir: data_dir.into(), sessions: RwLock::default() })))
    }

    pub fn data_dir(&self) -> &Path {
        &self.0.data_dir
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.read().unwrap().len()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.0.sessions.read().unwrap().keys().cloned().collect()
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<SessionRecord>>> {
        self.0.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    fn insert(&self, rec: SessionRecord) {
        let id = rec.session_id.clone();
        self.0.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(rec)));
    }

    pub fn session_path(&self, id: &str) -> PathBuf {
        self.0.data_dir.join("sessions").join(format!("{id}.safetensors"))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(info))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/clicks", post(post_clicks))
        .route("/sessions/{id}/slice", get(get_slice))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/save", post(save))
        .route("/sessions/{id}/load", post(load))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

#[derive(Serialize)]
struct ServiceInfo<'a> {
    name: &'static str,
    version: &'static str,
    config: &'a EngineConfig,
    sessions: usize,
}

async fn info(State(app): State<AppState>) -> Json<serde_json::Value> {
    let info = ServiceInfo {
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: &app.0.config,
        sessions: app.session_count(),
    };
    Json(serde_json::to_value(info).unwrap_or_default())
}

/// Per-session engine overrides, accepted as query parameters or in the JSON body.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub capacity: Option<usize>,
    pub clicks_per_interaction: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    fn merge(self, other: Overrides) -> Overrides {
        Overrides {
            capacity: other.capacity.or(self.capacity),
            clicks_per_interaction: other.clicks_per_interaction.or(self.clicks_per_interaction),
            seed: other.seed.or(self.seed),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// A volume under `<data-dir>/volumes/<id>.vvol`, or `synthetic:<seed>`.
    pub volume_id: String,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub dims: [usize; 3],
    pub grid_dims: [usize; 3],
    pub capacity: usize,
    pub mode: String,
    pub has_ground_truth: bool,
}

fn valid_volume_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

fn resolve_volume(app: &AppState, id: &str) -> ApiResult<(Volume, Option<Mask>)> {
    if let Some(seed) = id.strip_prefix(SYNTHETIC_PREFIX) {
        let seed: u64 =
            seed.parse().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("bad synthetic seed {seed:?}")))?;
        let (v, m) = gen_synthetic(seed, [32, 32, 32], 1 + (seed % 3) as usize)?;
        return Ok((v, Some(m)));
    }
    if !valid_volume_id(id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("bad volume id {id:?}")));
    }
    let path = app.data_dir().join("volumes").join(format!("{id}.vvol"));
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown volume {id}")));
    }
    Ok(read_vvol(&path)?)
}

async fn create_session(
    State(app): State<AppState>,
    Query(query): Query<Overrides>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let (volume, gt, overrides) = if is_json {
        let req: CreateRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))?;
        let (v, m) = resolve_volume(&app, &req.volume_id)?;
        (v, m, query.merge(req.overrides))
    } else {
        let (v, m) = read_vvol_bytes(&body)?;
        (v, m, query)
    };
    let mut config = app.0.config.clone();
    if let Some(n) = overrides.capacity {
        config.memory.capacity = n;
    }
    if let Some(k) = overrides.clicks_per_interaction {
        config.clicks_per_interaction = k;
    }
    config.validate()?;
    let seed = overrides.seed.unwrap_or(0);
    let app2 = app.clone();
    let cfg2 = config.clone();
    let state = blocking(move || start_session(&volume, &cfg2, &app2.0.params, gt, seed)).await??;
    let resp = CreateResponse {
        session_id: uuid::Uuid::new_v4().to_string(),
        dims: state.volume.dims(),
        grid_dims: state.embedding.dims,
        capacity: config.memory.capacity,
        mode: config.memory.mode.to_string(),
        has_ground_truth: state.gt.is_some(),
    };
    app.insert(SessionRecord::new(resp.session_id.clone(), state, config));
    Ok((StatusCode::CREATED, Json(resp)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub volume_id: String,
    pub dims: [usize; 3],
    pub interaction_count: u64,
    pub bank_size: usize,
    pub capacity: usize,
    pub mode: String,
    pub undo_available: usize,
    pub dice_trace: Vec<f64>,
    pub created_at: String,
    pub updated_at: String,
    pub persisted: bool,
}

fn view(r: &SessionRecord) -> SessionView {
    SessionView {
        session_id: r.session_id.clone(),
        volume_id: r.state.volume_id.clone(),
        dims: r.state.volume.dims(),
        interaction_count: r.state.interaction_count,
        bank_size: r.state.bank.len(),
        capacity: r.config.memory.capacity,
        mode: r.config.memory.mode.to_string(),
        undo_available: r.history_len(),
        dice_trace: r.state.dice_trace.clone(),
        created_at: r.created_at.to_rfc3339(),
        updated_at: r.updated_at.to_rfc3339(),
        persisted: r.persisted,
    }
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let rec = app.session(&id)?;
    let guard = rec.lock().await;
    Ok(Json(view(&guard)))
}

async fn delete_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    match app.0.sessions.write().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickIn {
    pub z: usize,
    pub y: usize,
    pub x: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask: Vec<(usize, usize)>,
    pub interaction_count: u64,
    pub bank_size: usize,
    pub dice: Option<f64>,
}

fn mask_response(r: &SessionRecord) -> MaskResponse {
    MaskResponse {
        mask: rle_encode(r.state.current_mask.data()),
        interaction_count: r.state.interaction_count,
        bank_size: r.state.bank.len(),
        dice: r.state.dice_trace.last().copied(),
    }
}

/// Requests on one session queue on its lock and run one at a time.
async fn post_clicks(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<MaskResponse>> {
    let rec = app.session(&id)?;
    let clicks: Vec<ClickIn> = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad click list: {e}")))?;
    let clicks: Vec<Click> = clicks.iter().map(|c| Click::new([c.z, c.y, c.x], c.polarity)).collect();
    let mut guard = rec.lock_owned().await;
    let app2 = app.clone();
    blocking(move || {
        guard.apply(&clicks, &app2.0.params)?;
        Ok(Json(mask_response(&guard)))
    })
    .await?
}

async fn undo(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<MaskResponse>> {
    let rec = app.session(&id)?;
    let mut guard = rec.lock().await;
    if !guard.undo() {
        return Err(ApiError::new(StatusCode::CONFLICT, "nothing to undo"));
    }
    Ok(Json(mask_response(&guard)))
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: String,
    pub index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceResponse {
    pub axis: String,
    pub index: usize,
    /// `[rows, cols]` of the 2D arrays.
    pub shape: [usize; 2],
    /// Row-major intensities of the normalized volume.
    pub intensity: Vec<f32>,
    /// Run-length pairs over the row-major slice.
    pub mask: Vec<(usize, usize)>,
    pub interaction_count: u64,
}

/// Row-major plane of a z-major volume. Rows and columns are the two remaining
/// axes in (z, y, x) order.
pub fn extract_slice<T: Copy>(data: &[T], dims: [usize; 3], axis: usize, index: usize) -> ([usize; 2], Vec<T>) {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x];
    match axis {
        0 => ([h, w], (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(index, y, x)).collect()),
        1 => ([d, w], (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, index, x)).collect()),
        _ => ([d, h], (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, index)).collect()),
    }
}

async fn get_slice(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<SliceResponse>> {
    let rec = app.session(&id)?;
    let axis = match q.axis.as_str() {
        "z" => 0,
        "y" => 1,
        "x" => 2,
        other => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("axis must be z, y or x, got {other:?}"))),
    };
    let guard = rec.lock().await;
    let dims = guard.state.volume.dims();
    if q.index >= dims[axis] {
        return Err(ApiError::new(
            StatusCode::RANGE_NOT_SATISFIABLE,
            format!("index {} outside 0..{} on axis {}", q.index, dims[axis], q.axis),
        ));
    }
    let (shape, intensity) = extract_slice(guard.state.volume.data(), dims, axis, q.index);
    let (_, mask) = extract_slice(guard.state.current_mask.data(), dims, axis, q.index);
    Ok(Json(SliceResponse {
        axis: q.axis,
        index: q.index,
        shape,
        intensity,
        mask: rle_encode(&mask),
        interaction_count: guard.state.interaction_count,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PersistResponse {
    pub session_id: String,
    pub path: PathBuf,
    pub interaction_count: u64,
}

fn check_session_id(id: &str) -> ApiResult<()> {
    uuid::Uuid::parse_str(id)
        .map(|_| ())
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed session id {id:?}")))
}

async fn save(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PersistResponse>> {
    let rec = app.session(&id)?;
    let path = app.session_path(&id);
    let mut guard = rec.lock_owned().await;
    blocking(move || {
        guard.save(&path)?;
        Ok(Json(PersistResponse { session_id: guard.session_id.clone(), path, interaction_count: guard.state.interaction_count }))
    })
    .await?
}

/// Loads a saved session into the registry, replacing any live one with the same id.
/// A failed load leaves the registry untouched.
async fn load(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PersistResponse>> {
    check_session_id(&id)?;
    let path = app.session_path(&id);
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no saved session {id}")));
    }
    let p2 = path.clone();
    let rec = blocking(move || SessionRecord::load(&p2)).await??;
    if rec.session_id != id {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("file holds session {}", rec.session_id)));
    }
    check_params(&rec.config, &app.0.params)?;
    let resp = PersistResponse { session_id: id, path, interaction_count: rec.state.interaction_count };
    app.insert(rec);
    Ok(Json(resp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_follow_axes() {
        let dims = [2, 3, 4];
        let data: Vec<usize> = (0..24).collect();
        assert_eq!(extract_slice(&data, dims, 0, 1), ([3, 4], (12..24).collect()));
        assert_eq!(extract_slice(&data, dims, 1, 2), ([2, 4], vec![8, 9, 10, 11, 20, 21, 22, 23]));
        assert_eq!(extract_slice(&data, dims, 2, 3), ([2, 3], vec![3, 7, 11, 15, 19, 23]));
    }

    #[test]
    fn volume_ids() {
        assert!(valid_volume_id("case_01.a"));
        assert!(!valid_volume_id("../x"));
        assert!(!valid_volume_id(".hidden"));
        assert!(!valid_volume_id(""));
    }
}

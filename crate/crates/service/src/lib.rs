//! HTTP front end over one frozen checkpoint.
//!
//! Every endpoint speaks JSON with base64 PNG images. Errors come back as
//! `{code, message}` bodies. Rendering is synchronous. Retargeting runs as a
//! queued job processed one at a time on a dedicated worker thread.

mod error;
mod session;

use std::collections::HashMap;
use std::ops::Range;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use jokr_core::inference::{edit_frame, encode_png, retarget, EditRequest, KeypointOverride, RetargetRequest};
use jokr_core::keypoints::KeypointSet;
use jokr_core::media_io::{Domain, Frame};
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody};
pub use session::{encode_base64, frame_id, ModelInfo, Session};

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadRequest {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointsRequest {
    /// Base64 PNG.
    pub frame: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointsResponse {
    #[serde(flatten)]
    pub keypoints: KeypointSet,
    pub frame_id: String,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderRequest {
    #[serde(default)]
    pub frame_id: Option<String>,
    /// Base64 PNG; used when `frame_id` is absent.
    #[serde(default)]
    pub frame: Option<String>,
    pub domain: Domain,
    #[serde(default)]
    pub overrides: Vec<KeypointOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    /// Base64 PNG.
    pub image: String,
    pub keypoints: KeypointSet,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetargetJobRequest {
    pub source_domain: Domain,
    #[serde(default = "default_true")]
    pub apply_affine: bool,
    #[serde(default)]
    pub frame_range: Option<Range<usize>>,
    /// Base64 PNG source frames; the checkpoint's training video otherwise.
    #[serde(default)]
    pub frames: Option<Vec<String>>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Retarget job record; `frames` holds the base64 PNG sequence once done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub status: JobState,
    pub checkpoint_id: String,
    #[serde(default)]
    pub frames: Vec<String>,
    #[serde(default)]
    pub keypoints: Vec<KeypointSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Job {
    id: u64,
    session: Arc<Session>,
    source: Vec<Frame>,
    request: RetargetRequest,
}

type JobTable = Arc<Mutex<HashMap<u64, JobStatus>>>;

/// Shared service state: the active session and the retarget job table.
pub struct AppState {
    session: RwLock<Option<Arc<Session>>>,
    jobs: JobTable,
    queue: Mutex<mpsc::Sender<Job>>,
    next_job: AtomicU64,
    data_base: PathBuf,
}

impl AppState {
    /// Empty state; `data_base` resolves relative video paths of checkpoints
    /// loaded later through `POST /model`.
    pub fn new(data_base: impl Into<PathBuf>) -> Arc<Self> {
        let jobs: JobTable = Arc::default();
        let (tx, rx) = mpsc::channel::<Job>();
        let table = jobs.clone();
        std::thread::Builder::new()
            .name("retarget-worker".into())
            .spawn(move || run_jobs(rx, table))
            .expect("spawn retarget worker");
        Arc::new(Self {
            session: RwLock::new(None),
            jobs,
            queue: Mutex::new(tx),
            next_job: AtomicU64::new(1),
            data_base: data_base.into(),
        })
    }

    pub fn with_session(session: Session) -> Arc<Self> {
        let state = Self::new(".");
        state.set_session(session);
        state
    }

    /// Replaces the active session. Cached frames belong to the old one and
    /// are dropped with it.
    pub fn set_session(&self, session: Session) {
        *self.session.write().expect("session lock") = Some(Arc::new(session));
    }

    pub fn session(&self) -> Result<Arc<Session>, ApiError> {
        self.session
            .read()
            .expect("session lock")
            .clone()
            .ok_or_else(ApiError::not_loaded)
    }
}

fn run_jobs(rx: mpsc::Receiver<Job>, table: JobTable) {
    for job in rx {
        set_job(&table, job.id, |s| s.status = JobState::Running);
        let result = retarget(job.session.models(), &job.source, &job.request).and_then(|out| {
            let frames = out
                .frames
                .iter()
                .map(|f| encode_png(f).map(|b| encode_base64(&b)))
                .collect::<jokr_core::Result<Vec<_>>>()?;
            Ok((frames, out.keypoints))
        });
        set_job(&table, job.id, |s| match result {
            Ok((frames, keypoints)) => {
                s.status = JobState::Done;
                s.frames = frames;
                s.keypoints = keypoints;
            }
            Err(e) => {
                log::error!("retarget job {} failed: {e}", job.id);
                s.status = JobState::Failed;
                s.error = Some(e.to_string());
            }
        });
    }
}

fn set_job(table: &JobTable, id: u64, f: impl FnOnce(&mut JobStatus)) {
    if let Some(status) = table.lock().expect("job table").get_mut(&id) {
        f(status);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model", get(get_model).post(load_model))
        .route("/keypoints", post(post_keypoints))
        .route("/render", post(post_render))
        .route("/retarget", post(post_retarget))
        .route("/retarget/{id}", get(get_retarget))
        .with_state(state)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn get_model(State(state): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    Ok(Json(state.session()?.info()))
}

async fn load_model(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<LoadRequest>, JsonRejection>,
) -> ApiResult<ModelInfo> {
    let req = body(payload)?;
    let base = state.data_base.clone();
    let session = blocking(move || Ok(Session::load(&req.checkpoint, &base)?)).await?;
    let info = session.info();
    state.set_session(session);
    log::info!("loaded checkpoint {}", info.checkpoint_id);
    Ok(Json(info))
}

async fn post_keypoints(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<KeypointsRequest>, JsonRejection>,
) -> ApiResult<KeypointsResponse> {
    let session = state.session()?;
    let req = body(payload)?;
    blocking(move || {
        let (frame_id, frame) = session.upload(&req.frame, req.domain)?;
        let keypoints = extract_one(&session, &frame)?;
        Ok(Json(KeypointsResponse {
            keypoints,
            frame_id,
            checkpoint_id: session.checkpoint_id().to_string(),
        }))
    })
    .await
}

fn extract_one(session: &Session, frame: &Frame) -> Result<KeypointSet, ApiError> {
    let models = session.models();
    let t = frame.to_tensor(models.dtype(), models.device())?;
    let t = t.unsqueeze(0).map_err(jokr_core::JokrError::from)?;
    let kp = jokr_core::inference::extract_keypoints(models, &t)?;
    Ok(KeypointSet::from_batch(&kp)?.remove(0))
}

async fn post_render(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<RenderRequest>, JsonRejection>,
) -> ApiResult<RenderResponse> {
    let session = state.session()?;
    let req = body(payload)?;
    blocking(move || {
        let frame = match (&req.frame_id, &req.frame) {
            (Some(id), _) => session.cached(id).ok_or_else(|| {
                ApiError::new(
                    axum::http::StatusCode::NOT_FOUND,
                    "UnknownFrame",
                    format!("no uploaded frame with id {id}"),
                )
            })?,
            (None, Some(encoded)) => session.upload(encoded, req.domain)?.1,
            (None, None) => return Err(ApiError::bad_request("either frame_id or frame is required")),
        };
        let (out, keypoints) = edit_frame(
            session.models(),
            &EditRequest {
                frame,
                domain: req.domain,
                overrides: req.overrides,
            },
        )?;
        Ok(Json(RenderResponse {
            image: encode_base64(&encode_png(&out)?),
            keypoints,
            checkpoint_id: session.checkpoint_id().to_string(),
        }))
    })
    .await
}

async fn post_retarget(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<RetargetJobRequest>, JsonRejection>,
) -> ApiResult<JobCreated> {
    let session = state.session()?;
    let req = body(payload)?;
    let source = match &req.frames {
        Some(encoded) => encoded
            .iter()
            .enumerate()
            .map(|(i, e)| {
                session.upload(e, req.source_domain).map(|(_, mut f)| {
                    f.index = i;
                    f
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => session
            .sources()
            .ok_or_else(|| ApiError::bad_request("checkpoint has no loadable training video; upload frames"))?
            .frames(req.source_domain)
            .to_vec(),
    };
    let request = RetargetRequest {
        source_domain: req.source_domain,
        apply_learned_affine: req.apply_affine,
        frame_range: req.frame_range,
    };
    let id = state.next_job.fetch_add(1, Ordering::Relaxed);
    state.jobs.lock().expect("job table").insert(
        id,
        JobStatus {
            job_id: id,
            status: JobState::Queued,
            checkpoint_id: session.checkpoint_id().to_string(),
            frames: Vec::new(),
            keypoints: Vec::new(),
            error: None,
        },
    );
    let job = Job {
        id,
        session,
        source,
        request,
    };
    state
        .queue
        .lock()
        .expect("job queue")
        .send(job)
        .map_err(|_| ApiError::internal("retarget worker stopped"))?;
    Ok(Json(JobCreated { job_id: id }))
}

async fn get_retarget(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<JobStatus> {
    let unknown = || {
        ApiError::new(
            axum::http::StatusCode::NOT_FOUND,
            "UnknownJob",
            format!("no retarget job {id}"),
        )
    };
    let id: u64 = id.parse().map_err(|_| unknown())?;
    let status = state.jobs.lock().expect("job table").get(&id).cloned();
    status.map(Json).ok_or_else(unknown)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

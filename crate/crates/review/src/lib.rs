//! Read-only HTTP API over pipeline run directories, plus a chat proxy for
//! discussing a video's verdicts with the configured LLM backend.
//!
//! Routes:
//!
//! * `GET  /api/runs`
//! * `GET  /api/runs/{run}/videos`
//! * `GET  /api/runs/{run}/videos/{video}/curves[?threshold=t]`
//! * `POST /api/chat/sessions` with `{"run", "video"}`
//! * `GET  /api/chat/sessions/{id}`
//! * `POST /api/chat/sessions/{id}/messages` with `{"text"}`
//!
//! Anything else falls through to the static console bundle when one is
//! configured.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use prismvau_core::ape::Task;
use prismvau_core::corpus::{frame_labels, load_manifest, Manifest, VideoRecord};
use prismvau_core::demo::CHAT_TAG;
use prismvau_core::gateway::{ChatRequest, ChatTurn, Gateway, Role};
use prismvau_core::metrics::{f1_at, fpr_at};
use prismvau_core::pipeline::{read_curve, read_json, read_jsonl, PipelineError, RunConfig, RunLayout, RunLock};
use prismvau_core::refiner::{partition_segments, VerdictRecord, MAX_SEGMENT_S};
use prismvau_core::{AnomalyCurve, Label};

/// Maximum number of user messages per chat session.
pub const MAX_TURNS: usize = 20;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub stage: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), stage: None }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn missing_stage(stage: &str, detail: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("stage '{stage}' has not been run: {detail}"),
            stage: Some(stage.to_string()),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::MissingStage { stage, detail } => ApiError::missing_stage(stage, detail),
            other => ApiError::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(stage) = self.stage {
            body["stage"] = Value::String(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone)]
struct Session {
    run: String,
    video: String,
    system: String,
    history: Vec<ChatTurn>,
    turns: usize,
}

/// Shared service state.
pub struct AppState {
    runs_root: PathBuf,
    gateway: Option<Arc<Gateway>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    /// `runs_root` holds one sub-directory per run.
    pub fn new(runs_root: impl Into<PathBuf>, gateway: Option<Arc<Gateway>>) -> Self {
        Self { runs_root: runs_root.into(), gateway, sessions: Mutex::new(HashMap::new()) }
    }

    /// State for the runs next to the config's run directory, chatting
    /// through the config's LLM backend when one is set.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let run_dir = cfg.resolve(&cfg.run_dir);
        let root = run_dir.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let gateway = match cfg.backends.llm {
            Some(_) => Some(Arc::new(cfg.gateway()?)),
            None => None,
        };
        Ok(Self::new(root, gateway))
    }

    fn run_dir(&self, id: &str) -> Result<PathBuf, ApiError> {
        let valid = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
        let dir = self.runs_root.join(id);
        if !valid || !dir.join(prismvau_core::pipeline::LOCK_FILE).is_file() {
            return Err(ApiError::not_found(format!("unknown run '{id}'")));
        }
        Ok(dir)
    }

    fn open_run(&self, id: &str) -> Result<OpenRun, ApiError> {
        let layout = RunLayout::new(self.run_dir(id)?);
        let config = RunLock::load(&layout)?.run_config();
        let manifest = load_manifest(config.manifest_path()).map_err(ApiError::internal)?;
        Ok(OpenRun { layout, config, manifest })
    }
}

struct OpenRun {
    layout: RunLayout,
    config: RunConfig,
    manifest: Manifest,
}

impl OpenRun {
    fn video(&self, id: &str) -> Result<&VideoRecord, ApiError> {
        self.manifest.get(id).ok_or_else(|| ApiError::not_found(format!("unknown video '{id}'")))
    }

    fn curve(&self, stage: &'static str, id: &str) -> Result<AnomalyCurve, ApiError> {
        let path = self.layout.curve(stage, id);
        if !path.is_file() {
            return Err(ApiError::missing_stage(stage, format!("no {stage} curve for '{id}'")));
        }
        Ok(read_curve(&path)?)
    }

    fn verdicts(&self, id: &str) -> Result<Vec<VerdictRecord>, ApiError> {
        let path = self.layout.video_verdicts(id);
        if !path.is_file() {
            return Err(ApiError::missing_stage("mllm", format!("no verdicts for '{id}'")));
        }
        Ok(read_jsonl(&path)?)
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub id: String,
    pub config_hash: String,
    pub dataset_manifest: String,
    pub stages: Vec<String>,
    /// `roc_auc`, `ap`, `f1` and `fpr` from the report, when present.
    pub metrics: Option<Value>,
}

fn summarize(state: &AppState, id: &str) -> Result<RunSummary, ApiError> {
    let layout = RunLayout::new(state.run_dir(id)?);
    let lock = RunLock::load(&layout)?;
    let stages = ["coarse", "mllm", "fused", "prompts", "history", "report"]
        .into_iter()
        .filter(|s| layout.stage(s).is_dir())
        .map(String::from)
        .collect();
    let metrics = match layout.report().is_file() {
        true => {
            let report: Value = read_json(&layout.report())?;
            Some(json!({
                "roc_auc": report["roc_auc"],
                "ap": report["ap"],
                "f1": report["f1"],
                "fpr": report["fpr"],
            }))
        }
        false => None,
    };
    Ok(RunSummary {
        id: id.to_string(),
        config_hash: lock.config_hash,
        dataset_manifest: lock.dataset_manifest.display().to_string(),
        stages,
        metrics,
    })
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Vec<RunSummary>> {
    blocking(move || {
        let mut ids: Vec<String> = match fs::read_dir(&state.runs_root) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().join(prismvau_core::pipeline::LOCK_FILE).is_file())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect(),
            Err(_) => Vec::new(),
        };
        ids.sort();
        ids.iter().map(|id| summarize(&state, id)).collect::<Result<Vec<_>, _>>()
    })
    .await
    .map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoSummary {
    pub id: String,
    pub label: Label,
    pub category: Option<String>,
    pub duration_s: f64,
    pub native_fps: f64,
    pub split: prismvau_core::Split,
}

async fn list_videos(State(state): State<Arc<AppState>>, UrlPath(run): UrlPath<String>) -> ApiResult<Vec<VideoSummary>> {
    blocking(move || {
        let open = state.open_run(&run)?;
        Ok(open
            .manifest
            .videos
            .iter()
            .map(|v| VideoSummary {
                id: v.id.clone(),
                label: v.label,
                category: v.category.clone(),
                duration_s: v.duration_s,
                native_fps: v.native_fps,
                split: v.split,
            })
            .collect())
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct CurveQuery {
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    /// Absent for videos without anomalous frames.
    pub f1: Option<f64>,
    /// Absent for videos without normal frames.
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoCurves {
    pub video_id: String,
    pub label: Label,
    pub category: Option<String>,
    pub duration_s: f64,
    /// Ground-truth spans in seconds, end exclusive.
    pub gt_intervals: Vec<[f64; 2]>,
    /// Segment boundaries in seconds.
    pub segments: Vec<[f64; 2]>,
    pub coarse: AnomalyCurve,
    pub mllm_steps: AnomalyCurve,
    pub fused: AnomalyCurve,
    pub verdicts: Vec<VerdictRecord>,
    pub metrics: ThresholdMetrics,
}

/// Per-video F1 and FPR of `fused` against the record's frame labels.
pub fn video_metrics(record: &VideoRecord, fused: &AnomalyCurve, threshold: f64) -> ThresholdMetrics {
    let labels = frame_labels(record, fused.rate);
    let n = labels.len().min(fused.values.len());
    let (s, l) = (&fused.values[..n], &labels[..n]);
    ThresholdMetrics { threshold, f1: f1_at(s, l, threshold).ok(), fpr: fpr_at(s, l, threshold).ok() }
}

async fn video_curves(
    State(state): State<Arc<AppState>>,
    UrlPath((run, video)): UrlPath<(String, String)>,
    Query(q): Query<CurveQuery>,
) -> ApiResult<VideoCurves> {
    blocking(move || {
        let open = state.open_run(&run)?;
        let record = open.video(&video)?;
        let threshold = q.threshold.unwrap_or(open.config.f1_threshold);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("threshold {threshold} outside [0, 1]")));
        }
        let coarse = open.curve("coarse", &video)?;
        let mllm_steps = open.curve("mllm", &video)?;
        let verdicts = open.verdicts(&video)?;
        let fused = open.curve("fused", &video)?;
        let segments = partition_segments(&record.id, record.duration_s, MAX_SEGMENT_S)
            .map_err(ApiError::internal)?
            .iter()
            .map(|s| [s.start_s, s.end_s])
            .collect();
        let gt_intervals = record
            .intervals()
            .iter()
            .map(|&[s, e]| [s as f64 / record.native_fps, (e + 1) as f64 / record.native_fps])
            .collect();
        Ok(VideoCurves {
            video_id: record.id.clone(),
            label: record.label,
            category: record.category.clone(),
            duration_s: record.duration_s,
            gt_intervals,
            segments,
            metrics: video_metrics(record, &fused, threshold),
            coarse,
            mllm_steps,
            fused,
            verdicts,
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct NewSession {
    run: String,
    video: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub session_id: String,
    pub run: String,
    pub video: String,
    pub turns: usize,
    pub history: Vec<ChatTurn>,
}

fn gateway(state: &AppState) -> Result<Arc<Gateway>, ApiError> {
    state
        .gateway
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no LLM backend configured"))
}

/// Opening turns of a session: the video reference followed by the stored
/// verdicts as assistant context.
fn seed_history(record: &VideoRecord, verdicts: &[VerdictRecord]) -> Vec<ChatTurn> {
    let summary: Vec<Value> = verdicts
        .iter()
        .map(|v| {
            json!({
                "segment": v.segment_index,
                "segment_start_s": v.start_s,
                "segment_end_s": v.end_s,
                "verdict": v.verdict,
            })
        })
        .collect();
    vec![
        ChatTurn {
            role: Role::User,
            content: format!("Video {} ({:.0} s). Summarize your findings.", record.id, record.duration_s),
            video_ref: Some(record.id.clone()),
        },
        ChatTurn {
            role: Role::Assistant,
            content: serde_json::to_string_pretty(&summary).expect("verdicts serialize"),
            video_ref: None,
        },
    ]
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<NewSession>) -> ApiResult<SessionInfo> {
    gateway(&state)?;
    let st = state.clone();
    let session = blocking(move || {
        let open = st.open_run(&req.run)?;
        let record = open.video(&req.video)?;
        let verdicts = open.verdicts(&req.video)?;
        let (system, _) = open.config.vau_prompts.resolve(Task::Vau, &open.layout)?;
        Ok(Session { run: req.run.clone(), video: req.video.clone(), system, history: seed_history(record, &verdicts), turns: 0 })
    })
    .await?;
    let id = uuid::Uuid::new_v4().to_string();
    let info = SessionInfo {
        session_id: id.clone(),
        run: session.run.clone(),
        video: session.video.clone(),
        turns: 0,
        history: session.history.clone(),
    };
    state.sessions.lock().expect("session map").insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(info))
}

fn find_session(state: &AppState, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
    state
        .sessions
        .lock()
        .expect("session map")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown session '{id}'")))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<SessionInfo> {
    let s = find_session(&state, &id)?;
    let s = s.lock().await;
    Ok(Json(SessionInfo { session_id: id, run: s.run.clone(), video: s.video.clone(), turns: s.turns, history: s.history.clone() }))
}

#[derive(Debug, Deserialize)]
struct NewMessage {
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatReply {
    pub session_id: String,
    pub reply: String,
    pub turns: usize,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(msg): Json<NewMessage>,
) -> ApiResult<ChatReply> {
    let session = find_session(&state, &id)?;
    // held across the call: one turn at a time per session
    let mut s = session.lock().await;
    if s.turns >= MAX_TURNS {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("history limit of {MAX_TURNS} turns reached")));
    }
    if msg.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty message"));
    }
    let gw = gateway(&state)?;
    let mut request = ChatRequest::new(CHAT_TAG, s.system.clone(), msg.text.clone());
    request.history = s.history.clone();
    let response = tokio::task::spawn_blocking(move || gw.chat(&request))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("LLM backend failed: {e}")))?;
    s.history.push(ChatTurn { role: Role::User, content: msg.text, video_ref: None });
    s.history.push(ChatTurn { role: Role::Assistant, content: response.text.clone(), video_ref: None });
    s.turns += 1;
    Ok(Json(ChatReply { session_id: id, reply: response.text, turns: s.turns }))
}

/// The API router, serving `static_dir` for every other path when given.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{run}/videos", get(list_videos))
        .route("/api/runs/{run}/videos/{video}/curves", get(video_curves))
        .route("/api/chat/sessions", post(create_session))
        .route("/api/chat/sessions/{id}", get(get_session))
        .route("/api/chat/sessions/{id}/messages", post(post_message))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub async fn serve(state: AppState, static_dir: Option<PathBuf>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state), static_dir.as_deref())).await
}

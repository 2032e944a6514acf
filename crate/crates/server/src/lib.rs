//! HTTP service that hands comparison tasks to human annotators and appends
//! their votes to the pipeline's vote log.
//!
//! Routes:
//! - `GET /api/tasks/next?annotator=ID` leases the next slot (204 when none, 429 while a lease is held)
//! - `POST /api/votes` records a choice for the caller's active lease (201, 403 without a lease, 409 on replay)
//! - `GET /api/render/{candidate}.svg` draws a displayed candidate or the reference face
//! - `GET /api/progress` reports slot and decision counts
//!
//! Anything else is served from the static UI directory.

pub mod queue;

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facepref::artifact::{append_record, open_append_log, read_jsonl, Header};
use facepref::coeffs::ActionVocabulary;
use facepref::discriminator::reference_coefficients;
use facepref::facerender::{render_region_highlight, render_svg, RenderSpec};
use facepref::prefdata::{Choice, ComparisonTask, DisplayOrder, Side, Vote, VOTES_SCHEMA};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::queue::{Assignment, Progress, Queue, QueueError};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("annotator {0} already holds an active lease")]
    LeaseHeld(String),
    #[error("no active lease matches this vote")]
    NoLease,
    #[error("vote already recorded for this slot")]
    AlreadyRecorded,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] facepref::Error),
}

impl ServerError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServerError::LeaseHeld(_) => StatusCode::TOO_MANY_REQUESTS,
            ServerError::NoLease => StatusCode::FORBIDDEN,
            ServerError::AlreadyRecorded => StatusCode::CONFLICT,
            ServerError::UnknownTask(_) | ServerError::UnknownCandidate(_) => StatusCode::NOT_FOUND,
            ServerError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServerError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServerError::LeaseHeld(_) => "lease_held",
            ServerError::NoLease => "no_lease",
            ServerError::AlreadyRecorded => "already_recorded",
            ServerError::UnknownTask(_) => "unknown_task",
            ServerError::UnknownCandidate(_) => "unknown_candidate",
            ServerError::BadRequest(_) => "bad_request",
            ServerError::Core(e) => e.kind(),
        }
    }
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

impl From<QueueError> for ServerError {
    fn from(e: QueueError) -> Self {
        match e {
            QueueError::LeaseHeld(a) => ServerError::LeaseHeld(a.annotator_id),
            QueueError::UnknownTask(t) => ServerError::UnknownTask(t),
            QueueError::NoLease => ServerError::NoLease,
            QueueError::AlreadyRecorded => ServerError::AlreadyRecorded,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub lease: Duration,
    pub annotators_per_task: usize,
    pub render: RenderSpec,
}

/// Immutable data needed to draw candidates.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub vocab: ActionVocabulary,
    /// Observation of every sample a task refers to, keyed by sample id.
    pub observations: HashMap<String, Vec<f64>>,
}

struct VoteLog {
    file: File,
    path: PathBuf,
}

pub struct AppState {
    queue: RwLock<Queue>,
    log: Mutex<VoteLog>,
    catalog: Catalog,
    render: RenderSpec,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Builds the queue for `tasks` and replays any votes already in the log.
    /// New votes are appended to the same file.
    pub fn open(
        tasks: Vec<ComparisonTask>,
        catalog: Catalog,
        options: ServerOptions,
        votes_path: &Path,
        log_header: &Header,
    ) -> Result<Self, ServerError> {
        options.render.validate(&catalog.vocab)?;
        if options.annotators_per_task == 0 {
            return Err(ServerError::BadRequest("annotators_per_task must be positive".into()));
        }
        for t in &tasks {
            if !catalog.observations.contains_key(&t.sample_id) {
                return Err(ServerError::Core(facepref::Error::Unknown(format!(
                    "sample {} referenced by task {}",
                    t.sample_id, t.task_id
                ))));
            }
        }
        let mut queue = Queue::new(tasks, options.annotators_per_task, options.lease.as_millis() as u64);
        let has_votes = std::fs::metadata(votes_path).is_ok_and(|m| m.len() > 0);
        if has_votes {
            let (_, votes): (_, Vec<Vote>) = read_jsonl(votes_path, VOTES_SCHEMA)?;
            let total = votes.len();
            let skipped = votes.into_iter().filter(|v| !queue.restore(v.clone())).count();
            tracing::info!(total, skipped, "replayed vote log");
        }
        let file = open_append_log(votes_path, log_header)?;
        Ok(Self {
            queue: RwLock::new(queue),
            log: Mutex::new(VoteLog {
                file,
                path: votes_path.to_path_buf(),
            }),
            catalog,
            render: options.render,
        })
    }

    pub fn progress(&self) -> Progress {
        self.queue.read().expect("queue lock").progress(now_ms())
    }

    fn next(&self, annotator: &str) -> Result<Option<Assignment>, ServerError> {
        Ok(self.queue.write().expect("queue lock").next(annotator, now_ms())?)
    }

    fn vote(&self, req: &VoteRequest) -> Result<Vote, ServerError> {
        let mut queue = self.queue.write().expect("queue lock");
        let vote = queue.resolve_vote(&req.task_id, &req.annotator_id, req.choice, req.display_order, now_ms())?;
        let mut log = self.log.lock().expect("log lock");
        let VoteLog { file, path } = &mut *log;
        append_record(file, path, &vote)?;
        queue.commit(vote.clone());
        Ok(vote)
    }

    fn render(&self, candidate: &str) -> Result<String, ServerError> {
        let unknown = || ServerError::UnknownCandidate(candidate.to_string());
        let queue = self.queue.read().expect("queue lock");
        let (task_id, coeffs) = if let Some(task_id) = candidate.strip_suffix("_ref") {
            let task = queue.task(task_id).ok_or_else(unknown)?;
            let obs = &self.catalog.observations[&task.sample_id];
            (task_id, reference_coefficients(obs, self.catalog.vocab.bins())?)
        } else {
            let mut parts = candidate.rsplitn(3, '_');
            let (side, order, task_id) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(o), Some(t)) => (s, o, t),
                _ => return Err(unknown()),
            };
            let order = match order {
                "AB" => DisplayOrder::AB,
                "BA" => DisplayOrder::BA,
                _ => return Err(unknown()),
            };
            let side = match side {
                "left" => Side::Left,
                "right" => Side::Right,
                _ => return Err(unknown()),
            };
            let task = queue.task(task_id).ok_or_else(unknown)?;
            let (left, right) = task.displayed(order);
            let shown = if side == Side::Left { left } else { right };
            (task_id, shown.clone())
        };
        let region = queue.task(task_id).ok_or_else(unknown)?.region.face_region();
        Ok(match region {
            Some(r) => render_region_highlight(&coeffs, &self.render, r)?,
            None => render_svg(&coeffs, &self.render)?,
        })
    }
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

/// What an annotator is shown. Candidate identity stays on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub annotator_id: String,
    pub region: String,
    pub lease_expiry_ms: u64,
    pub left_url: String,
    pub right_url: String,
    pub reference_url: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRequest {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    /// Optional; lets a client say which view a retried vote belongs to.
    #[serde(default)]
    pub display_order: Option<DisplayOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteReceipt {
    pub task_id: String,
    pub display_order: DisplayOrder,
}

fn checked_annotator(id: Option<&str>) -> Result<&str, ServerError> {
    match id.map(str::trim) {
        Some(a) if !a.is_empty() => Ok(a),
        _ => Err(ServerError::BadRequest("annotator id is required".into())),
    }
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Response, ServerError> {
    let annotator = checked_annotator(q.annotator.as_deref())?;
    let Some(a) = state.next(annotator)? else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let region = {
        let queue = state.queue.read().expect("queue lock");
        queue.task(&a.task_id).map(|t| t.region.to_string()).unwrap_or_default()
    };
    let base = format!("/api/render/{}", a.task_id);
    let payload = TaskPayload {
        left_url: format!("{base}_{}_left.svg", a.display_order),
        right_url: format!("{base}_{}_right.svg", a.display_order),
        reference_url: format!("{base}_ref.svg"),
        task_id: a.task_id,
        annotator_id: a.annotator_id,
        region,
        lease_expiry_ms: a.lease_expiry_ms,
    };
    Ok(Json(payload).into_response())
}

async fn post_vote(State(state): State<Arc<AppState>>, Json(req): Json<VoteRequest>) -> Result<Response, ServerError> {
    checked_annotator(Some(&req.annotator_id))?;
    let vote = state.vote(&req)?;
    let receipt = VoteReceipt {
        task_id: vote.task_id,
        display_order: vote.display_order,
    };
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

async fn render_candidate(State(state): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> Result<Response, ServerError> {
    let candidate = file
        .strip_suffix(".svg")
        .ok_or_else(|| ServerError::UnknownCandidate(file.clone()))?;
    let svg = state.render(candidate)?;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

async fn progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.progress())
}

/// The JSON API, with `static_dir` served for every other path.
pub fn router(state: Arc<AppState>, static_dir: &Path) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/votes", post(post_vote))
        .route("/api/render/{file}", get(render_candidate))
        .route("/api/progress", get(progress))
        .with_state(state)
        .fallback_service(ServeDir::new(static_dir))
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

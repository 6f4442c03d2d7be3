//! Session service: the active loop behind an HTTP API.
//!
//! Each session owns a [`SessionState`]. Scoring runs on the blocking pool
//! after creation and after every accepted batch; clients poll `status` and
//! `batch` meanwhile. Every transition is checkpointed when a checkpoint
//! directory is configured.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cleanloop::active_loop::{Answer, AnnotatorAnswer, SessionCheckpoint, SessionState, StopReason};
use cleanloop::dataset::{error_mask, file_hash, load_dataset, Content as DataContent, Dataset, DatasetError};
use cleanloop::eval::{iteration_yields, EvaluationReport};
use cleanloop::scoring::{EnsembleConfig, EnsembleScorer, ErrorScorer};
use cleanloop::trainer::{Progress, TrainerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{Ack, Batch, BatchItem, Content, Corrections, CreateSession, Created, ErrorBody, Health, Mode, Phase, Report, Status, Stopped, WIRE_VERSION};

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Dataset used when a create request names none.
    pub default_dataset: Option<PathBuf>,
    pub default_k: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// What a session needs to be rebuilt after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceCheckpoint {
    v: u32,
    id: String,
    folds: usize,
    trainer: TrainerConfig,
    ensemble: EnsembleConfig,
    token: Option<String>,
    created: u64,
    updated: u64,
    stop_requested: bool,
    session: SessionCheckpoint,
}

struct Session {
    id: String,
    state: SessionState,
    original: Arc<Dataset>,
    scorer: EnsembleScorer,
    dataset_path: String,
    dataset_hash: String,
    token: Option<String>,
    created: u64,
    updated: u64,
    progress: Arc<Progress>,
    stop_requested: bool,
    /// A scoring pass is running for this session.
    scoring: bool,
    error: Option<String>,
}

impl Session {
    fn phase(&self) -> Phase {
        if self.state.is_stopped() {
            Phase::Stopped
        } else if self.state.pending_batch.is_some() {
            Phase::AwaitingAnnotations
        } else if self.state.iteration == 0 {
            Phase::Scoring
        } else {
            Phase::Retraining
        }
    }

    fn mode(&self) -> Mode {
        if self.original.has_gold() {
            Mode::Simulation
        } else {
            Mode::Live
        }
    }

    fn touch(&mut self) {
        self.updated = now().max(self.updated);
    }

    fn checkpoint(&self) -> ServiceCheckpoint {
        ServiceCheckpoint {
            v: 1,
            id: self.id.clone(),
            folds: self.scorer.folds,
            trainer: self.scorer.trainer.clone(),
            ensemble: self.scorer.ensemble,
            token: self.token.clone(),
            created: self.created,
            updated: self.updated,
            stop_requested: self.stop_requested,
            session: self.state.checkpoint(self.dataset_path.clone(), self.dataset_hash.clone()),
        }
    }

    fn status(&self) -> Status {
        Status {
            v: WIRE_VERSION,
            id: self.id.clone(),
            phase: self.phase(),
            mode: self.mode(),
            iteration: self.state.iteration,
            corrected_count: self.state.corrected_ids.len(),
            total: self.state.dataset.len(),
            last_batch_error_fraction: self.state.last_batch_error_fraction(),
            stop_reason: self.state.stop_reason,
            progress: match self.phase() {
                Phase::Scoring | Phase::Retraining => self.progress.fraction(),
                _ => 1.0,
            },
            error: self.error.clone(),
            created: self.created,
            updated: self.updated,
        }
    }

    fn report(&self) -> Report {
        let evaluation = if self.original.has_gold() {
            let mask = error_mask(&self.original).ok();
            mask.and_then(|mask| {
                EvaluationReport::from_ranking(
                    "active",
                    self.state.seed,
                    &self.state.final_ranking(),
                    &self.original.ids(),
                    &mask,
                    iteration_yields(&self.state.query_log),
                )
                .ok()
            })
        } else {
            None
        };
        Report {
            v: WIRE_VERSION,
            id: self.id.clone(),
            mode: self.mode(),
            iteration: self.state.iteration,
            stop_reason: self.state.stop_reason,
            per_iteration_yield: iteration_yields(&self.state.query_log),
            query_log: self.state.query_log.clone(),
            dataset: format!("/sessions/{}/dataset", self.id),
            evaluation,
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

type SessionRef = Arc<Mutex<Session>>;

fn lock(session: &SessionRef) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: Mutex<BTreeMap<String, SessionRef>>,
    next_id: AtomicU64,
}

impl AppState {
    /// Creates the state, restoring every session found in the checkpoint
    /// directory. Any unreadable checkpoint is an error naming the file.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let mut sessions = BTreeMap::new();
        let mut next_id = 1;
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for path in files {
                let session = restore_session(&path)?;
                if let Some(n) = session.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                    next_id = next_id.max(n + 1);
                }
                sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
            }
        }
        Ok(Self { inner: Arc::new(Inner { config, sessions: Mutex::new(sessions), next_id: AtomicU64::new(next_id) }) })
    }

    /// Relaunches scoring for restored sessions that were mid-scoring.
    /// Must run inside a tokio runtime.
    pub fn resume_pending(&self) {
        for session in self.all_sessions() {
            if lock(&session).state.needs_scoring() {
                self.launch_scoring(session);
            }
        }
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().map(|s| s.len()).unwrap_or(0)
    }

    fn all_sessions(&self) -> Vec<SessionRef> {
        self.inner.sessions.lock().map(|s| s.values().cloned().collect()).unwrap_or_default()
    }

    /// Writes a checkpoint for every session.
    pub fn persist_all(&self) {
        for session in self.all_sessions() {
            self.persist(&mut lock(&session));
        }
    }

    fn persist(&self, session: &mut Session) {
        let Some(dir) = &self.inner.config.checkpoint_dir else { return };
        if let Err(e) = write_checkpoint(&dir.join(format!("{}.json", session.id)), &session.checkpoint()) {
            eprintln!("cleanloop: {e}");
            session.error = Some(e.to_string());
        }
    }

    fn launch_scoring(&self, session: SessionRef) {
        let (dataset, scorer, seed, progress) = {
            let mut s = lock(&session);
            s.scoring = true;
            (s.state.dataset.clone(), s.scorer.clone(), s.state.seed, s.progress.clone())
        };
        let app = self.clone();
        tokio::spawn(async move {
            let result = tokio::task::spawn_blocking(move || scorer.score(&dataset, seed, Some(&progress))).await;
            let mut s = lock(&session);
            s.scoring = false;
            match result {
                Ok(Ok(scores)) => {
                    if let Err(e) = s.state.accept_scores(scores) {
                        s.error = Some(e.to_string());
                    } else {
                        s.error = None;
                    }
                }
                Ok(Err(e)) => s.error = Some(format!("scoring failed: {e}")),
                Err(e) => s.error = Some(format!("scoring task failed: {e}")),
            }
            if s.stop_requested {
                s.state.stop(StopReason::Manual);
            }
            s.touch();
            app.persist(&mut s);
        });
    }

    fn session(&self, id: &str, headers: &HeaderMap) -> Result<SessionRef, ApiError> {
        let session = self
            .inner
            .sessions
            .lock()
            .ok()
            .and_then(|s| s.get(id).cloned())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}")))?;
        let expected = lock(&session).token.clone();
        if let Some(token) = expected {
            let given = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
            if given != Some(token.as_str()) {
                return Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token"));
            }
        }
        Ok(session)
    }
}

fn write_checkpoint(path: &Path, checkpoint: &ServiceCheckpoint) -> Result<(), ServiceError> {
    let err = |message: String| ServiceError::Checkpoint { path: path.display().to_string(), message };
    let bytes = serde_json::to_vec_pretty(checkpoint).map_err(|e| err(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| err(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
}

fn restore_session(path: &Path) -> Result<Session, ServiceError> {
    let err = |message: String| ServiceError::Checkpoint { path: path.display().to_string(), message };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let cp: ServiceCheckpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    if cp.v != 1 || cp.session.v != 1 {
        return Err(err("unsupported checkpoint version".into()));
    }
    let dataset_path = &cp.session.dataset_path;
    let hash = file_hash(dataset_path).map_err(|e| err(format!("dataset {dataset_path}: {e}")))?;
    if hash != cp.session.dataset_hash {
        return Err(err(format!("dataset {dataset_path} changed since the session started")));
    }
    let original = load_dataset(dataset_path).map_err(|e| err(format!("dataset {dataset_path}: {e}")))?;
    let state = SessionState::restore(&cp.session, original.clone()).map_err(|e| err(e.to_string()))?;
    Ok(Session {
        id: cp.id,
        state,
        original: Arc::new(original),
        scorer: EnsembleScorer { folds: cp.folds, trainer: cp.trainer, ensemble: cp.ensemble },
        dataset_path: cp.session.dataset_path.clone(),
        dataset_hash: cp.session.dataset_hash.clone(),
        token: cp.token,
        created: cp.created,
        updated: cp.updated,
        progress: Arc::new(Progress::new()),
        stop_requested: cp.stop_requested,
        scoring: false,
        error: None,
    })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody::new(message) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/corrections", post(post_corrections))
        .route("/sessions/{id}/status", get(get_status))
        .route("/sessions/{id}/report", get(get_report))
        .route("/sessions/{id}/stop", post(post_stop))
        .route("/sessions/{id}/dataset", get(get_dataset))
        .with_state(state)
}

async fn healthz() -> Json<Health> {
    Json(Health { v: WIRE_VERSION, version: cleanloop::VERSION.to_string() })
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    let req: CreateSession = if body.is_empty() { CreateSession::default() } else { serde_json::from_slice(&body).map_err(|e| bad(e.to_string()))? };
    if req.v != WIRE_VERSION {
        return Err(bad(format!("unsupported payload version {}", req.v)));
    }
    let path = req
        .dataset_ref
        .clone()
        .map(PathBuf::from)
        .or_else(|| app.inner.config.default_dataset.clone())
        .ok_or_else(|| bad("dataset_ref is required".into()))?;
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("dataset {} not found", path.display())));
    }
    let dataset = load_dataset(&path).map_err(|e| match e {
        DatasetError::Io(_) => ApiError::new(StatusCode::NOT_FOUND, format!("dataset {}: {e}", path.display())),
        e => bad(format!("dataset {}: {e}", path.display())),
    })?;
    let dataset_hash = file_hash(&path).map_err(|e| bad(e.to_string()))?;

    let folds = req.folds.unwrap_or(DEFAULT_FOLDS);
    if folds < 2 || folds > dataset.len() {
        return Err(bad(format!("folds must lie in [2, {}]", dataset.len())));
    }
    let trainer = req.trainer.clone().unwrap_or_default();
    trainer.validate().map_err(|e| bad(e.to_string()))?;
    let ensemble = req.ensemble.unwrap_or_default();
    ensemble.validate().map_err(|e| bad(e.to_string()))?;
    let k = req.k.or(app.inner.config.default_k).unwrap_or(cleanloop::active_loop::DEFAULT_K);
    let state = SessionState::new(dataset.clone(), k, req.stop_config.clone().unwrap_or_default(), req.seed.unwrap_or(0))
        .map_err(|e| bad(e.to_string()))?;

    let id = format!("s{}", app.inner.next_id.fetch_add(1, Ordering::SeqCst));
    let created = now();
    let mut session = Session {
        id: id.clone(),
        state,
        original: Arc::new(dataset),
        scorer: EnsembleScorer { folds, trainer, ensemble },
        dataset_path: path.display().to_string(),
        dataset_hash,
        token: req.token,
        created,
        updated: created,
        progress: Arc::new(Progress::new()),
        stop_requested: false,
        scoring: false,
        error: None,
    };
    app.persist(&mut session);
    let session = Arc::new(Mutex::new(session));
    app.inner.sessions.lock().map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "state poisoned"))?.insert(id.clone(), session.clone());
    app.launch_scoring(session);
    Ok((StatusCode::ACCEPTED, Json(Created { v: WIRE_VERSION, id })))
}

fn not_ready(s: &Session) -> ApiError {
    let phase = s.phase();
    let mut err = match phase {
        Phase::Stopped => {
            let mut e = ApiError::new(StatusCode::GONE, "session is stopped");
            e.body.stop_reason = s.state.stop_reason;
            e.body.report = Some(format!("/sessions/{}/report", s.id));
            e
        }
        _ if !s.scoring && s.error.is_some() => {
            let message = format!("no batch is outstanding; {}", s.error.as_deref().unwrap_or_default());
            ApiError::new(StatusCode::CONFLICT, message)
        }
        _ => {
            let mut e = ApiError::new(StatusCode::CONFLICT, "no batch is outstanding; scoring is in progress");
            e.body.progress = Some(s.progress.fraction());
            e
        }
    };
    err.body.phase = Some(phase);
    err
}

async fn get_batch(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Json<Batch>> {
    let session = app.session(&id, &headers)?;
    let s = lock(&session);
    let Some(pending) = &s.state.pending_batch else { return Err(not_ready(&s)) };
    let scores = s.state.last_scores.as_ref().expect("a batch implies scores");
    let space = &s.state.dataset.label_space;
    let items = pending
        .iter()
        .enumerate()
        .map(|(rank, iid)| {
            let inst = s.state.dataset.get(iid).expect("batch ids exist");
            let content = match &inst.content {
                DataContent::Text(text) => Content::Text { text: text.clone() },
                DataContent::Tokens(tokens) => Content::Tokens { tokens: tokens.clone() },
            };
            BatchItem {
                id: iid.clone(),
                content,
                labels: inst.observed.iter().map(|&l| space.name(l).to_string()).collect(),
                score: scores.score_of(iid).expect("scores cover the dataset"),
                rank: rank + 1,
            }
        })
        .collect();
    Ok(Json(Batch { v: WIRE_VERSION, iteration: s.state.iteration + 1, label_space: space.labels().to_vec(), items }))
}

async fn post_corrections(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<Ack>> {
    let session = app.session(&id, &headers)?;
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    let req: Corrections = serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if req.v != WIRE_VERSION {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unsupported payload version {}", req.v)));
    }
    let mut s = lock(&session);
    if s.phase() != Phase::AwaitingAnnotations {
        let mut err = ApiError::new(StatusCode::CONFLICT, "no batch is awaiting annotations");
        err.body.phase = Some(s.phase());
        err.body.stop_reason = s.state.stop_reason;
        return Err(err);
    }
    let space = s.state.dataset.label_space.clone();
    let items = req
        .answers
        .iter()
        .map(|a| {
            let answer = match (a.confirm, &a.new_labels) {
                (true, None) => Answer::Confirm,
                (false, Some(labels)) => Answer::Correct(
                    labels
                        .iter()
                        .map(|l| space.index_of(l).ok_or_else(|| unprocessable(format!("{}: unknown label {l:?}", a.id))))
                        .collect::<Result<_, _>>()?,
                ),
                _ => return Err(unprocessable(format!("{}: give exactly one of confirm or new_labels", a.id))),
            };
            Ok(cleanloop::active_loop::AnswerItem { id: a.id.clone(), answer })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = s.state.submit(&AnnotatorAnswer { items }).map_err(|e| unprocessable(e.to_string()))?;
    s.touch();
    app.persist(&mut s);
    let rescore = !s.state.is_stopped();
    drop(s);
    if rescore {
        app.launch_scoring(session);
    }
    Ok(Json(Ack { v: WIRE_VERSION, iteration: outcome.iteration, batch_error_fraction: outcome.batch_error_fraction }))
}

async fn get_status(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Json<Status>> {
    let session = app.session(&id, &headers)?;
    let status = lock(&session).status();
    Ok(Json(status))
}

async fn get_report(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Json<Report>> {
    let session = app.session(&id, &headers)?;
    let s = lock(&session);
    if !s.state.is_stopped() {
        let mut err = ApiError::new(StatusCode::CONFLICT, "the session is still running");
        err.body.phase = Some(s.phase());
        return Err(err);
    }
    Ok(Json(s.report()))
}

async fn post_stop(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<(StatusCode, Json<Stopped>)> {
    let session = app.session(&id, &headers)?;
    let mut s = lock(&session);
    let status = match s.phase() {
        Phase::Stopped => StatusCode::OK,
        Phase::AwaitingAnnotations => {
            s.state.stop(StopReason::Manual);
            StatusCode::OK
        }
        Phase::Scoring | Phase::Retraining if s.scoring => {
            s.stop_requested = true;
            StatusCode::ACCEPTED
        }
        Phase::Scoring | Phase::Retraining => {
            s.state.stop(StopReason::Manual);
            StatusCode::OK
        }
    };
    s.touch();
    app.persist(&mut s);
    Ok((status, Json(Stopped { v: WIRE_VERSION, phase: s.phase(), stop_reason: s.state.stop_reason })))
}

async fn get_dataset(State(app): State<AppState>, UrlPath(id): UrlPath<String>, headers: HeaderMap) -> ApiResult<Response> {
    let session = app.session(&id, &headers)?;
    let bytes = lock(&session).state.dataset.to_jsonl_bytes();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

/// Binds `addr` and serves until ctrl-c or SIGTERM, then checkpoints every
/// session.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
    eprintln!("cleanloop: listening on {}", listener.local_addr()?);
    state.resume_pending();
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    state.persist_all();
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
}

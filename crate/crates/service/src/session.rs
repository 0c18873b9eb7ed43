//! Live sessions and their persistence.
//!
//! Each session runs the query loop on its own worker thread. The loop
//! blocks in a [`RatingChannel`] until a rating arrives over HTTP; the
//! session status is the single place where state is published.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use redopt_core::engine::EngineError;
use redopt_core::oracle::{Oracle, OracleError, PendingQuery, DEFAULT_INTERACTIVE_TIMEOUT};
use redopt_core::seed::derive_seed;
use redopt_core::{
    objective, run_query_loop, App, DatasetFile, PriorParams, RatingChannel, RawRating, Reduction,
    SessionTrace, Specification, UserScore,
};

use crate::api::{
    AnsweredQuery, ApiError, Progress, QueryDescriptor, RatingScale, RecommendationView,
    ReductionDescriptor, SessionState, SessionView, TraceRow,
};

pub const SESSION_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Where session files live; sessions are memory-only without it.
    pub session_dir: Option<PathBuf>,
    /// How long a pending query waits for a rating before the session aborts.
    pub rating_timeout: Duration,
    /// Upper bound on how long a request waits for the loop to pick the
    /// next query.
    pub settle_timeout: Duration,
    /// Base seed for sessions created without one. Random when absent.
    pub seed: Option<u64>,
    /// Allowed browser origin; any origin when absent.
    pub cors_origin: Option<String>,
    /// Static files served under `/` (the browser client bundle).
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_dir: None,
            rating_timeout: DEFAULT_INTERACTIVE_TIMEOUT,
            settle_timeout: Duration::from_secs(30),
            seed: None,
            cors_origin: None,
            static_dir: None,
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
struct Status {
    state: SessionState,
    pending: Option<PendingQuery>,
    answered: Vec<AnsweredQuery>,
    trace: Option<SessionTrace>,
    error: Option<String>,
    updated_at: u64,
}

impl Status {
    fn transition(&mut self, next: SessionState) {
        debug_assert!(
            self.state.can_become(next),
            "illegal transition {:?} -> {:?}",
            self.state,
            next
        );
        self.state = next;
        self.updated_at = now_ms();
    }
}

/// On-disk form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: String,
    pub id: String,
    pub app_id: String,
    pub spec: Specification,
    pub budget: usize,
    pub state: SessionState,
    pub answered: Vec<AnsweredQuery>,
    pub trace: Option<SessionTrace>,
    pub error: Option<String>,
    pub created_at: u64,
    pub updated_at: u64,
}

pub struct Session {
    id: String,
    app: Arc<App>,
    spec: Specification,
    budget: usize,
    created_at: u64,
    channel: Arc<RatingChannel>,
    status: Mutex<Status>,
    changed: Condvar,
    file: Option<PathBuf>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    fn query_count(&self) -> usize {
        self.budget.min(self.app.reductions.len())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Status> {
        self.status.lock().expect("session status poisoned")
    }

    fn record(&self, status: &Status) -> SessionRecord {
        SessionRecord {
            schema_version: SESSION_SCHEMA_VERSION.to_string(),
            id: self.id.clone(),
            app_id: self.app.id.clone(),
            spec: self.spec,
            budget: self.budget,
            state: status.state,
            answered: status.answered.clone(),
            trace: status.trace.clone(),
            error: status.error.clone(),
            created_at: self.created_at,
            updated_at: status.updated_at,
        }
    }

    /// Writes the session file. Failures are logged, not fatal.
    fn persist(&self, status: &Status) {
        if let Some(path) = &self.file {
            if let Err(err) = write_record(path, &self.record(status)) {
                log::error!("cannot persist session {}: {err}", self.id);
            }
        }
    }

    fn update(&self, f: impl FnOnce(&mut Status)) {
        let mut status = self.lock();
        f(&mut status);
        self.persist(&status);
        self.changed.notify_all();
    }

    /// Waits until the loop is no longer choosing a query, or `timeout`.
    fn settle(&self, answered_at_least: usize, timeout: Duration) -> Status {
        let deadline = Instant::now() + timeout;
        let mut status = self.lock();
        loop {
            let busy = status.state == SessionState::Selecting
                || (status.state == SessionState::AwaitingRating
                    && status.answered.len() < answered_at_least);
            let now = Instant::now();
            if !busy || now >= deadline {
                return status.clone();
            }
            status = self
                .changed
                .wait_timeout(status, deadline - now)
                .expect("session status poisoned")
                .0;
        }
    }

    fn view(&self, status: &Status) -> SessionView {
        let total = self.query_count();
        SessionView {
            id: self.id.clone(),
            app_id: self.app.id.clone(),
            spec: self.spec,
            budget: self.budget,
            state: status.state,
            progress: Progress {
                answered: status.answered.len(),
                total,
            },
            pending: status.pending.as_ref().map(|p| self.descriptor(p, status)),
            answered: status.answered.clone(),
            recommendation_id: status.trace.as_ref().and_then(|t| t.recommendation.clone()),
            error: status.error.clone(),
            created_at: self.created_at,
            updated_at: status.updated_at,
        }
    }

    fn descriptor(&self, pending: &PendingQuery, status: &Status) -> QueryDescriptor {
        QueryDescriptor {
            session_id: self.id.clone(),
            step: pending.step + 1,
            reduction: ReductionDescriptor::from(&pending.reduction),
            scale: RatingScale::default(),
            progress: Progress {
                answered: status.answered.len(),
                total: self.query_count(),
            },
        }
    }
}

fn write_record(path: &Path, record: &SessionRecord) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_vec_pretty(record).map_err(std::io::Error::other)?;
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)
}

/// Oracle that publishes each query on the session before blocking.
struct SessionOracle {
    session: Arc<Session>,
    timeout: Duration,
}

impl Oracle for SessionOracle {
    fn query(&mut self, reduction: &Reduction) -> Result<UserScore, OracleError> {
        let session = &self.session;
        let step = session.channel.publish(reduction)?;
        session.update(|s| {
            s.pending = Some(PendingQuery {
                reduction: reduction.clone(),
                step,
            });
            s.transition(SessionState::AwaitingRating);
        });
        let rating = session.channel.wait_answer(self.timeout)?;
        let score = rating.normalized();
        session.update(|s| {
            s.pending = None;
            s.answered.push(AnsweredQuery {
                reduction_id: reduction.id.clone(),
                rating,
                score: score.value(),
            });
            s.transition(SessionState::Selecting);
        });
        Ok(score)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cannot use session directory {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// All sessions of one running service.
pub struct SessionManager {
    dataset: Arc<DatasetFile>,
    apps: HashMap<String, Arc<App>>,
    prior: Arc<PriorParams>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    created: AtomicU64,
}

impl SessionManager {
    /// Loads persisted sessions from the session directory. Sessions that
    /// were still running are marked aborted.
    pub fn new(
        dataset: DatasetFile,
        prior: PriorParams,
        config: ServiceConfig,
    ) -> Result<Self, StoreError> {
        let apps = dataset
            .apps
            .iter()
            .map(|a| (a.id.clone(), Arc::new(a.clone())))
            .collect();
        let manager = Self {
            dataset: Arc::new(dataset),
            apps,
            prior: Arc::new(prior),
            config,
            sessions: RwLock::new(HashMap::new()),
            created: AtomicU64::new(0),
        };
        if let Some(dir) = &manager.config.session_dir {
            std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
                path: dir.clone(),
                source,
            })?;
            manager.restore(dir)?;
        }
        Ok(manager)
    }

    fn restore(&self, dir: &Path) -> Result<(), StoreError> {
        let entries = std::fs::read_dir(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut sessions = self.sessions.write().expect("session map poisoned");
        for path in paths {
            let record: SessionRecord = match std::fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
            {
                Ok(r) => r,
                Err(err) => {
                    log::warn!("skipping unreadable session file {}: {err}", path.display());
                    continue;
                }
            };
            let Some(app) = self.apps.get(&record.app_id) else {
                log::warn!(
                    "skipping session {}: app {} is not in the dataset",
                    record.id,
                    record.app_id
                );
                continue;
            };
            let channel = Arc::new(RatingChannel::new());
            channel.close();
            let mut status = Status {
                state: record.state,
                pending: None,
                answered: record.answered,
                trace: record.trace,
                error: record.error,
                updated_at: record.updated_at,
            };
            let interrupted = matches!(
                status.state,
                SessionState::Selecting | SessionState::AwaitingRating
            );
            if interrupted {
                status.transition(SessionState::Aborted);
                status.error = Some("service restarted while the session was in progress".into());
            }
            let session = Arc::new(Session {
                id: record.id.clone(),
                app: app.clone(),
                spec: record.spec,
                budget: record.budget,
                created_at: record.created_at,
                channel,
                status: Mutex::new(status),
                changed: Condvar::new(),
                file: Some(path.clone()),
                worker: Mutex::new(None),
            });
            if interrupted {
                session.persist(&session.lock());
            }
            sessions.insert(record.id, session);
        }
        log::info!("restored {} session(s) from {}", sessions.len(), dir.display());
        Ok(())
    }

    pub fn dataset(&self) -> &DatasetFile {
        &self.dataset
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    /// Starts a session and returns once its first query is chosen or it is
    /// already done. Blocks; call from a blocking context.
    pub fn create(
        &self,
        app_id: &str,
        spec: Specification,
        budget: usize,
        seed: Option<u64>,
    ) -> Result<SessionView, ApiError> {
        let app = self
            .apps
            .get(app_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown app {app_id}")))?;
        if app.reductions.is_empty() {
            return Err(ApiError::invalid(
                "invalid_request",
                format!("app {app_id} has no reductions"),
            ));
        }
        let ordinal = self.created.fetch_add(1, Ordering::Relaxed);
        let seed = seed.unwrap_or_else(|| match self.config.seed {
            Some(base) => derive_seed(base, &[&ordinal.to_le_bytes()]),
            None => rand::random(),
        });
        let id = uuid::Uuid::new_v4().simple().to_string();
        let now = now_ms();
        let session = Arc::new(Session {
            id: id.clone(),
            app,
            spec,
            budget,
            created_at: now,
            channel: Arc::new(RatingChannel::new()),
            status: Mutex::new(Status {
                state: SessionState::Selecting,
                pending: None,
                answered: Vec::new(),
                trace: None,
                error: None,
                updated_at: now,
            }),
            changed: Condvar::new(),
            file: self
                .config
                .session_dir
                .as_ref()
                .map(|d| d.join(format!("{id}.json"))),
            worker: Mutex::new(None),
        });
        session.persist(&session.lock());
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), session.clone());

        let worker_session = session.clone();
        let prior = self.prior.clone();
        let timeout = self.config.rating_timeout;
        let handle = std::thread::Builder::new()
            .name(format!("session-{}", &id[..8]))
            .spawn(move || run_session(worker_session, prior, seed, timeout))
            .map_err(|e| ApiError::internal(format!("cannot start session worker: {e}")))?;
        *session.worker.lock().expect("worker slot poisoned") = Some(handle);
        log::info!("session {id}: app {app_id}, {spec}, budget {budget}");

        let status = session.settle(0, self.config.settle_timeout);
        Ok(session.view(&status))
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ApiError> {
        let session = self.get(id)?;
        let status = session.lock();
        Ok(session.view(&status))
    }

    pub fn next_query(&self, id: &str) -> Result<QueryDescriptor, ApiError> {
        let session = self.get(id)?;
        let status = session.lock();
        match (status.state, &status.pending) {
            (SessionState::AwaitingRating, Some(p)) => Ok(session.descriptor(p, &status)),
            (SessionState::Aborted, _) => Err(aborted(&session, &status)),
            (state, _) => Err(ApiError::conflict(format!(
                "session {id} is {}, no query is pending",
                state_name(state)
            ))
            .with_detail(serde_json::json!({ "state": state }))),
        }
    }

    /// Hands a rating to the session and waits for the next state. Blocks.
    pub fn submit(&self, id: &str, reduction_id: &str, rating: i64) -> Result<SessionView, ApiError> {
        let session = self.get(id)?;
        if let Err(err) = RawRating::new(rating) {
            return Err(ApiError::invalid("invalid_rating", err.to_string()));
        }
        let answered = {
            let status = session.lock();
            match (status.state, &status.pending) {
                (SessionState::AwaitingRating, Some(p)) if p.reduction.id != reduction_id => {
                    return Err(stale(&session, &status, reduction_id));
                }
                (SessionState::AwaitingRating, Some(_)) => status.answered.len(),
                (SessionState::Aborted, _) => return Err(aborted(&session, &status)),
                (state, _) => {
                    return Err(ApiError::conflict(format!(
                        "session {id} is {}, not awaiting a rating",
                        state_name(state)
                    ))
                    .with_detail(serde_json::json!({ "state": state })))
                }
            }
        };
        match session.channel.submit(reduction_id, rating) {
            Ok(()) => {}
            Err(OracleError::Domain(err)) => {
                return Err(ApiError::invalid("invalid_rating", err.to_string()))
            }
            Err(OracleError::WrongReduction { .. }) | Err(OracleError::NothingPending) => {
                let status = session.lock();
                return Err(stale(&session, &status, reduction_id));
            }
            Err(OracleError::AlreadyAnswered(_)) => {
                return Err(ApiError::conflict(format!(
                    "a rating for {reduction_id} was already accepted"
                )))
            }
            Err(OracleError::Closed) | Err(OracleError::Timeout(_)) => {
                let status = session.settle(answered + 1, self.config.settle_timeout);
                return Err(aborted(&session, &status));
            }
            Err(other) => return Err(ApiError::internal(other.to_string())),
        }
        let status = session.settle(answered + 1, self.config.settle_timeout);
        Ok(session.view(&status))
    }

    pub fn recommendation(&self, id: &str) -> Result<RecommendationView, ApiError> {
        let session = self.get(id)?;
        let status = session.lock();
        match status.state {
            SessionState::Done => {}
            SessionState::Aborted => return Err(aborted(&session, &status)),
            state => {
                return Err(ApiError::conflict(format!(
                    "session {id} is {}, no recommendation yet",
                    state_name(state)
                ))
                .with_detail(serde_json::json!({ "state": state })))
            }
        }
        let trace = status.trace.as_ref().expect("done sessions carry a trace");
        let rec_id = trace
            .recommendation
            .as_deref()
            .expect("done sessions carry a recommendation");
        let reduction = session
            .app
            .reduction(rec_id)
            .expect("recommendation belongs to the app");
        let estimate = trace
            .estimates
            .iter()
            .find(|e| e.reduction_id == rec_id)
            .map(|e| e.score)
            .unwrap_or(UserScore::ZERO);
        let rows = trace
            .steps
            .iter()
            .enumerate()
            .map(|(i, step)| TraceRow {
                step: i + 1,
                reduction_id: step.reduction_id.clone(),
                kind: session
                    .app
                    .reduction(&step.reduction_id)
                    .map(|r| r.kind)
                    .expect("queried reduction belongs to the app"),
                rating: status.answered.get(i).map(|a| a.rating),
                score: step.score.value(),
            })
            .collect();
        Ok(RecommendationView {
            session_id: session.id.clone(),
            app_id: session.app.id.clone(),
            spec: session.spec,
            reduction: ReductionDescriptor::from(reduction),
            estimated_score: estimate.value(),
            estimated_objective: objective(estimate, &reduction.savings, &session.spec),
            trace: rows,
            estimates: trace.estimates.clone(),
            warnings: trace.warnings.clone(),
        })
    }

    /// Closes every live session and waits for workers to record the abort.
    pub fn shutdown(&self) {
        let sessions: Vec<Arc<Session>> = self
            .sessions
            .read()
            .expect("session map poisoned")
            .values()
            .cloned()
            .collect();
        for session in &sessions {
            session.channel.close();
        }
        for session in &sessions {
            let handle = session.worker.lock().expect("worker slot poisoned").take();
            if let Some(handle) = handle {
                if handle.join().is_err() {
                    log::error!("session {} worker panicked", session.id);
                }
            }
        }
    }
}

fn state_name(state: SessionState) -> &'static str {
    match state {
        SessionState::Selecting => "selecting",
        SessionState::AwaitingRating => "awaiting_rating",
        SessionState::Done => "done",
        SessionState::Aborted => "aborted",
    }
}

fn stale(session: &Session, status: &Status, submitted: &str) -> ApiError {
    let pending = status.pending.as_ref().map(|p| p.reduction.id.clone());
    ApiError::conflict(format!("rating for {submitted} does not match the pending query"))
        .with_detail(serde_json::json!({
            "session_id": session.id,
            "pending_reduction_id": pending,
        }))
}

fn aborted(session: &Session, status: &Status) -> ApiError {
    ApiError::gone(format!(
        "session {} was aborted: {}",
        session.id,
        status.error.as_deref().unwrap_or("unknown reason")
    ))
    .with_detail(serde_json::json!({
        "answered": status.answered,
        "trace": status.trace,
    }))
}

fn run_session(session: Arc<Session>, prior: Arc<PriorParams>, seed: u64, timeout: Duration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oracle = SessionOracle {
        session: session.clone(),
        timeout,
    };
    let result = run_query_loop(
        &session.app,
        session.spec,
        session.budget,
        &prior,
        &mut oracle,
        &mut rng,
    );
    session.update(|s| match result {
        Ok(trace) => {
            s.pending = None;
            s.trace = Some(trace);
            s.transition(SessionState::Done);
        }
        Err(EngineError::Oracle { source, trace }) => {
            s.pending = None;
            s.trace = Some(*trace);
            s.error = Some(match source {
                OracleError::Closed => "session closed by the service".to_string(),
                other => other.to_string(),
            });
            s.transition(SessionState::Aborted);
        }
        Err(other) => {
            s.pending = None;
            s.error = Some(other.to_string());
            s.transition(SessionState::Aborted);
        }
    });
    log::info!("session {} finished", session.id);
}

//! HTTP API over an event-sourced engine.
//!
//! All mutations go through one engine behind a mutex. Generation runs
//! outside the lock so sessions overlap; feedback commits are serialized.
//! Errors are `{"error": {"code", "message"}}` with a stable `code`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coem_core::attribution::{
    JudgeAttributor, LeaveOneOut, OverlapCoalition, OverlapJudge, RegenerateScorer, Shapley, Uniform,
};
use coem_core::engine::EngineError;
use coem_core::event::{Journal, NullJournal};
use coem_core::extraction::{JudgeExtractor, Lexicon, NullExtractor, RuleBasedExtractor};
use coem_core::simulator::Histogram;
use coem_core::{
    Attributor, BackendError, Engine, EngineState, Event, EventKind, Extractor, FragmentId, Generator,
    MockGenerator, PoolConfig, Rating, SelectorQuery, Session, SessionId, SessionRequest, Strategy,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{BackendKind, Config, ExtractorKind, DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE};
use crate::journal::{FileJournal, LogError, MirroredJournal};
use crate::judge::ChatJudge;
use crate::remote::RemoteGenerator;
use crate::snapshot;

pub const EVENT_LOG_FILE: &str = "events.log";
pub const POOL_CONFIG_FILE: &str = "pool.json";

pub type SharedGenerator = Arc<dyn Generator + Send + Sync>;
pub type SharedAttributor = Arc<dyn Attributor + Send + Sync>;
pub type SharedExtractor = Arc<dyn Extractor + Send + Sync>;
type ServiceJournal = MirroredJournal<Box<dyn Journal + Send>>;

/// Backend, attributor and extractor a service runs with.
#[derive(Clone)]
pub struct Components {
    pub generator: SharedGenerator,
    pub attributor: SharedAttributor,
    pub extractor: SharedExtractor,
}

impl Components {
    /// Mock generator, overlap judge, no extraction.
    pub fn mock(seed: u64) -> Self {
        Self {
            generator: Arc::new(MockGenerator::new(seed)),
            attributor: Arc::new(JudgeAttributor::new(OverlapJudge)),
            extractor: Arc::new(NullExtractor),
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self, ServiceError> {
        let svc = &cfg.service;
        let remote = match svc.backend {
            BackendKind::Mock => None,
            BackendKind::Remote => Some(Arc::new(
                RemoteGenerator::new(cfg.backend.clone()).map_err(|e| ServiceError::Setup(e.to_string()))?,
            )),
        };
        let generator: SharedGenerator = match &remote {
            Some(r) => r.clone(),
            None => Arc::new(MockGenerator::new(svc.mock_seed)),
        };
        let attributor: SharedAttributor = match (svc.attributor, &remote) {
            (Strategy::Uniform, _) => Arc::new(Uniform),
            (Strategy::Shapley, _) => Arc::new(Shapley::new(OverlapCoalition)),
            (Strategy::LeaveOneOut, _) => Arc::new(LeaveOneOut::new(RegenerateScorer::new(generator.clone()))),
            (Strategy::ExternalJudge, Some(r)) => Arc::new(JudgeAttributor::new(ChatJudge::new(r.clone()))),
            (Strategy::ExternalJudge, None) => Arc::new(JudgeAttributor::new(OverlapJudge)),
        };
        let extractor: SharedExtractor = match svc.extractor {
            ExtractorKind::None => Arc::new(NullExtractor),
            ExtractorKind::Judge => Arc::new(JudgeExtractor::new(generator.clone())),
            ExtractorKind::Rules => {
                let path = svc.lexicon.as_ref().ok_or_else(|| ServiceError::Setup("no lexicon".into()))?;
                let source = fs::read_to_string(path)
                    .map_err(|e| ServiceError::Setup(format!("lexicon {}: {e}", path.display())))?;
                let lexicon = Lexicon::parse(&source).map_err(|e| ServiceError::Setup(e.to_string()))?;
                Arc::new(RuleBasedExtractor::new(lexicon))
            }
        };
        Ok(Self {
            generator,
            attributor,
            extractor,
        })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    errors: AtomicU64,
    sessions_generated: AtomicU64,
    feedback_applied: AtomicU64,
    feedback_deferred: AtomicU64,
    backend_errors: AtomicU64,
    fragments_added: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

pub struct Service {
    engine: Mutex<Engine<ServiceJournal>>,
    components: Components,
    page_size: usize,
    api_token: Option<String>,
    counters: Counters,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Pool configuration stored next to a log so it can be replayed alone.
pub fn write_pool_config(dir: &Path, config: &PoolConfig) -> io::Result<()> {
    let mut body = serde_json::to_string_pretty(config).expect("pool config serializes");
    body.push('\n');
    fs::write(dir.join(POOL_CONFIG_FILE), body)
}

pub fn read_pool_config(path: &Path) -> Result<PoolConfig, ServiceError> {
    let text = fs::read_to_string(path)?;
    let cfg: PoolConfig = serde_json::from_str(&text)
        .map_err(|e| ServiceError::Setup(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| ServiceError::Setup(e.to_string()))?;
    Ok(cfg)
}

impl Service {
    /// In-memory service; nothing touches the disk.
    pub fn in_memory(config: PoolConfig, components: Components) -> Result<Self, ServiceError> {
        let journal: Box<dyn Journal + Send> = Box::new(NullJournal);
        let engine = Engine::new(
            config,
            MirroredJournal {
                inner: journal,
                events: Vec::new(),
            },
        )?;
        Ok(Self::with_engine(engine, components))
    }

    /// Opens `data_dir`, replaying its log. A crashed, half-written batch is cut off.
    pub fn open(data_dir: &Path, config: PoolConfig, components: Components, fsync: bool) -> Result<Self, ServiceError> {
        fs::create_dir_all(data_dir)?;
        let cfg_path = data_dir.join(POOL_CONFIG_FILE);
        if cfg_path.exists() {
            let stored = read_pool_config(&cfg_path)?;
            if stored != config {
                return Err(ServiceError::Setup(format!(
                    "{} holds a different pool config than the one requested; use a fresh data_dir",
                    cfg_path.display()
                )));
            }
        } else {
            write_pool_config(data_dir, &config)?;
        }
        let (journal, recovery) = FileJournal::open(&data_dir.join(EVENT_LOG_FILE))?;
        let journal = if fsync { journal } else { journal.without_sync() };
        if recovery.torn_tail || recovery.dropped > 0 {
            tracing::warn!(
                torn_tail = recovery.torn_tail,
                dropped = recovery.dropped,
                "discarded an unfinished batch at the end of the log"
            );
        }
        let replayed = EngineState::replay(config, &recovery.events)?;
        let journal: Box<dyn Journal + Send> = Box::new(journal);
        let engine = Engine::from_state(
            replayed.state,
            MirroredJournal {
                inner: journal,
                events: recovery.events,
            },
        );
        Ok(Self::with_engine(engine, components))
    }

    pub fn from_config(cfg: &Config) -> Result<Self, ServiceError> {
        let components = Components::from_config(cfg)?;
        let mut service = Self::open(&cfg.service.data_dir, cfg.pool_config(), components, cfg.service.fsync)?;
        service.page_size = cfg.service.page_size;
        service.api_token = std::env::var(&cfg.service.api_token_env).ok().filter(|t| !t.is_empty());
        Ok(service)
    }

    fn with_engine(engine: Engine<ServiceJournal>, components: Components) -> Self {
        Self {
            engine: Mutex::new(engine.with_clock(now_millis)),
            components,
            page_size: DEFAULT_PAGE_SIZE,
            api_token: None,
            counters: Counters::default(),
        }
    }

    pub fn with_api_token(mut self, token: Option<String>) -> Self {
        self.api_token = token;
        self
    }

    pub fn with_page_size(mut self, n: usize) -> Self {
        self.page_size = n.clamp(1, MAX_PAGE_SIZE);
        self
    }

    fn engine(&self) -> MutexGuard<'_, Engine<ServiceJournal>> {
        self.engine.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Current pool in snapshot format.
    pub fn snapshot(&self) -> Vec<u8> {
        snapshot::snapshot_bytes(self.engine().pool())
    }

    pub fn events(&self) -> Vec<Event> {
        self.engine().journal().events.clone()
    }

    pub fn add_fragment(&self, body: AddFragment) -> Result<(StatusCode, Value), ApiError> {
        let source = body.source.unwrap_or_else(|| "api".into());
        if source.is_empty()
            || source.len() > 32
            || !source.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
        {
            return Err(ApiError::validation("source must be 1-32 chars of [a-z0-9_-]"));
        }
        let mut engine = self.engine();
        let existing = engine.pool().lookup_text(&body.text);
        let id = engine.add_fragment(&body.text, &source).map_err(ApiError::from_engine)?;
        let created = existing.is_none();
        if created {
            bump(&self.counters.fragments_added);
        }
        let f = engine.pool().get(id).expect("just added");
        let status = if created { StatusCode::CREATED } else { StatusCode::OK };
        Ok((status, json!({"created": created, "fragment": FragmentView::from(f)})))
    }

    pub fn pool_page(&self, q: &PoolQuery) -> Result<Value, ApiError> {
        let limit = q.limit.unwrap_or(self.page_size);
        if limit == 0 || limit > MAX_PAGE_SIZE {
            return Err(ApiError::validation(format!("limit must be in 1..={MAX_PAGE_SIZE}")));
        }
        let offset = q.offset.unwrap_or(0);
        let include_pruned = q.include_pruned.unwrap_or(false);
        let engine = self.engine();
        let pool = engine.pool();
        let listed: Vec<_> = pool.fragments().filter(|f| include_pruned || f.alive).collect();
        let page: Vec<FragmentView> = listed.iter().skip(offset).take(limit).map(|f| FragmentView::from(*f)).collect();
        let next = (offset + page.len() < listed.len()).then_some(offset + page.len());
        Ok(json!({
            "total": listed.len(),
            "offset": offset,
            "limit": limit,
            "next_offset": next,
            "fragments": page,
        }))
    }

    pub fn pool_stats(&self) -> Value {
        let engine = self.engine();
        let pool = engine.pool();
        let theta = pool.config().theta;
        let histogram = Histogram::from_values(pool.alive().map(|f| f.value));
        let rows: Vec<Value> = histogram
            .rows()
            .map(|(lo, hi, count)| json!({"bin_low": lo, "bin_high": hi, "count": count}))
            .collect();
        json!({
            "total": pool.total_count(),
            "alive": pool.alive_count(),
            "pruned": pool.total_count() - pool.alive_count(),
            "theta": theta,
            "alpha": pool.config().alpha,
            "iteration": pool.iteration(),
            "retained_fraction": pool.high_value_fraction(theta).ok(),
            "histogram": rows,
        })
    }

    pub fn create_session(&self, body: CreateSession) -> Result<Value, ApiError> {
        let k = body.k.unwrap_or_else(|| self.engine().pool().config().subset_size);
        let mut query = SelectorQuery::top(k);
        query.topic_hint = body.hint.filter(|h| !h.trim().is_empty());
        let req = SessionRequest {
            query,
            user_input: body.user_input.unwrap_or_default(),
            conversation: body.conversation,
        };
        let plan = self.engine().plan_session(&req).map_err(ApiError::from_engine)?;
        let output = self.components.generator.generate(&plan.request);
        let mut engine = self.engine();
        let session = match output {
            Ok(text) => engine.commit_session(plan, text).map_err(ApiError::from_engine)?,
            Err(err) => {
                bump(&self.counters.backend_errors);
                engine
                    .record_backend_error(err.to_string())
                    .map_err(ApiError::from_engine)?;
                return Err(ApiError::backend(&err));
            }
        };
        bump(&self.counters.sessions_generated);
        Ok(session_view(&engine, &session))
    }

    pub fn get_session(&self, id: u64) -> Result<Value, ApiError> {
        let engine = self.engine();
        let session = engine.session(SessionId(id)).ok_or_else(|| ApiError::unknown_session(SessionId(id)))?;
        Ok(session_view(&engine, session))
    }

    pub fn submit_feedback(&self, id: u64, body: FeedbackBody) -> Result<Value, ApiError> {
        let id = SessionId(id);
        let a = &*self.components.attributor;
        let e = &*self.components.extractor;
        let mut engine = self.engine();
        let session = engine.session(id).ok_or_else(|| ApiError::unknown_session(id))?.clone();
        let r = engine
            .rating_scale()
            .map(body.rating)
            .map_err(|err| ApiError::validation(err.to_string()))?;
        let before = engine.journal().events.len();
        // resubmitting the rating of a deferred commit retries it
        let result = if session.has_pending_feedback() && session.feedback == Some(r) {
            engine.retry_feedback(id, a, e)
        } else {
            engine.submit_feedback(id, body.rating, a, e)
        };
        let session = match result {
            Ok(s) => s,
            Err(err) => {
                if matches!(err, EngineError::AttributionDeferred { .. } | EngineError::ExtractionDeferred { .. }) {
                    bump(&self.counters.feedback_deferred);
                }
                return Err(ApiError::from_engine(err));
            }
        };
        bump(&self.counters.feedback_applied);
        let mut extracted = Vec::new();
        let mut pruned = Vec::new();
        for ev in &engine.journal().events[before..] {
            match &ev.kind {
                EventKind::FragmentsExtracted { fragments, .. } => extracted.extend(fragments.iter().map(|f| f.id)),
                EventKind::Pruned { ids, .. } => pruned.extend(ids.iter().copied()),
                _ => {}
            }
        }
        let updated: Vec<Value> = session
            .selected
            .iter()
            .filter_map(|fid| engine.pool().get(*fid))
            .map(|f| json!({"id": f.id, "value": f.value, "alive": f.alive}))
            .collect();
        Ok(json!({
            "session_id": id,
            "status": session.status,
            "r": r,
            "weights": session.attribution.as_ref().map(|a| a.weights.clone()),
            "updated": updated,
            "extracted": extracted,
            "pruned": pruned,
        }))
    }

    pub fn events_page(&self, q: &EventsQuery) -> Result<Value, ApiError> {
        let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE);
        if limit == 0 || limit > MAX_PAGE_SIZE {
            return Err(ApiError::validation(format!("limit must be in 1..={MAX_PAGE_SIZE}")));
        }
        let from = q.from.unwrap_or(0);
        let engine = self.engine();
        let all = &engine.journal().events;
        let start = usize::try_from(from).unwrap_or(usize::MAX).min(all.len());
        let page = &all[start..(start + limit).min(all.len())];
        Ok(json!({
            "from": from,
            "next": (start + page.len()) as u64,
            "events": page,
        }))
    }

    pub fn metrics(&self) -> Value {
        let c = &self.counters;
        let load = |x: &AtomicU64| x.load(Ordering::Relaxed);
        let engine = self.engine();
        let pool = engine.pool();
        json!({
            "requests_total": load(&c.requests),
            "errors_total": load(&c.errors),
            "sessions_generated_total": load(&c.sessions_generated),
            "feedback_applied_total": load(&c.feedback_applied),
            "feedback_deferred_total": load(&c.feedback_deferred),
            "backend_errors_total": load(&c.backend_errors),
            "fragments_added_total": load(&c.fragments_added),
            "events_in_log": engine.journal().events.len(),
            "sessions": engine.state().sessions.len(),
            "fragments_alive": pool.alive_count(),
            "fragments_total": pool.total_count(),
            "pool_iteration": pool.iteration(),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct FragmentView {
    pub id: FragmentId,
    pub text: String,
    pub value: f64,
    pub session_count: u64,
    pub feedback_count: u64,
    pub created_iteration: u64,
    pub alive: bool,
}

impl From<&coem_core::Fragment> for FragmentView {
    fn from(f: &coem_core::Fragment) -> Self {
        Self {
            id: f.id,
            text: f.text.clone(),
            value: f.value,
            session_count: f.session_count,
            feedback_count: f.feedback_count,
            created_iteration: f.created_iteration,
            alive: f.alive,
        }
    }
}

/// Cited fragments carry per-response source labels (`S1`, `S2`, ...) instead of
/// their stored source.
fn session_view(engine: &Engine<ServiceJournal>, s: &Session) -> Value {
    let mut labels: BTreeMap<&str, String> = BTreeMap::new();
    let cited: Vec<Value> = s
        .selected
        .iter()
        .filter_map(|id| engine.pool().get(*id))
        .map(|f| {
            let n = labels.len() + 1;
            let label = labels.entry(f.source.as_str()).or_insert_with(|| format!("S{n}")).clone();
            json!({"id": f.id, "text": f.text, "source": label})
        })
        .collect();
    json!({
        "session_id": s.id,
        "conversation": s.conversation,
        "output": s.output_text,
        "cited": cited,
        "status": s.status,
        "feedback": s.feedback,
        "pending_feedback": s.has_pending_feedback(),
    })
}

#[derive(Debug, Deserialize)]
pub struct AddFragment {
    pub text: String,
    /// Category label such as `news` or `analyst`.
    pub source: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    pub hint: Option<String>,
    pub k: Option<usize>,
    pub user_input: Option<String>,
    pub conversation: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct FeedbackBody {
    pub rating: Rating,
}

#[derive(Debug, Default, Deserialize)]
pub struct PoolQuery {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
    pub include_pruned: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    pub from: Option<u64>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message)
    }

    fn unknown_session(id: SessionId) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }

    fn backend(err: &BackendError) -> Self {
        let code = match err {
            BackendError::Auth(_) => "backend_auth",
            BackendError::Timeout(_) => "backend_timeout",
            BackendError::Malformed(_) => "backend_malformed",
            BackendError::Unavailable(_) => "backend_unavailable",
            BackendError::InvalidRequest(_) => "backend_invalid_request",
        };
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, err.to_string())
    }

    pub fn from_engine(err: EngineError) -> Self {
        use coem_core::PoolError;
        match &err {
            EngineError::UnknownSession(id) => Self::unknown_session(*id),
            EngineError::DuplicateFeedback(_) => Self::new(StatusCode::CONFLICT, "duplicate_feedback", err.to_string()),
            EngineError::Pool(PoolError::UnknownFragment(_)) => {
                Self::new(StatusCode::NOT_FOUND, "unknown_fragment", err.to_string())
            }
            EngineError::Pool(PoolError::PrunedFragment(_)) => {
                Self::new(StatusCode::CONFLICT, "pool_changed", err.to_string())
            }
            EngineError::Pool(_) | EngineError::InvalidQuery(_) | EngineError::Feedback(_) => {
                Self::validation(err.to_string())
            }
            EngineError::EmptyPool => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_pool", err.to_string()),
            EngineError::Backend(b) => Self::backend(b),
            EngineError::AttributionDeferred { .. } | EngineError::ExtractionDeferred { .. } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "feedback_deferred", err.to_string())
            }
            EngineError::NothingToRetry(_) => Self::new(StatusCode::CONFLICT, "nothing_to_retry", err.to_string()),
            EngineError::Storage(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "storage_error", err.to_string()),
            EngineError::Replay(_) | EngineError::Interrupted(_) | EngineError::Poisoned => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", err.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({"error": {"code": self.code, "message": self.message}}));
        (self.status, body).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::validation(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::validation(r.body_text())
    }
}

type Shared = Arc<Service>;

async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ApiError>
where
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    let result = tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))?;
    result
}

async fn add_fragment(
    State(svc): State<Shared>,
    body: Result<Json<AddFragment>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(body) = body?;
    let (status, value) = blocking(svc, move |s| s.add_fragment(body)).await?;
    Ok((status, Json(value)))
}

async fn list_pool(
    State(svc): State<Shared>,
    q: Result<Query<PoolQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = q?;
    blocking(svc, move |s| s.pool_page(&q)).await.map(Json)
}

async fn pool_stats(State(svc): State<Shared>) -> Result<Json<Value>, ApiError> {
    blocking(svc, |s| Ok(s.pool_stats())).await.map(Json)
}

async fn pool_snapshot(State(svc): State<Shared>) -> Result<Response, ApiError> {
    let bytes = blocking(svc, |s| Ok(s.snapshot())).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

async fn create_session(
    State(svc): State<Shared>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(body) = body?;
    let value = blocking(svc, move |s| s.create_session(body)).await?;
    Ok((StatusCode::CREATED, Json(value)))
}

async fn get_session(State(svc): State<Shared>, id: Result<UrlPath<u64>, axum::extract::rejection::PathRejection>) -> Result<Json<Value>, ApiError> {
    let UrlPath(id) = id.map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", "session ids are integers"))?;
    blocking(svc, move |s| s.get_session(id)).await.map(Json)
}

async fn submit_feedback(
    State(svc): State<Shared>,
    id: Result<UrlPath<u64>, axum::extract::rejection::PathRejection>,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let UrlPath(id) = id.map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", "session ids are integers"))?;
    let Json(body) = body?;
    blocking(svc, move |s| s.submit_feedback(id, body)).await.map(Json)
}

async fn events(
    State(svc): State<Shared>,
    q: Result<Query<EventsQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let Query(q) = q?;
    blocking(svc, move |s| s.events_page(&q)).await.map(Json)
}

async fn metrics(State(svc): State<Shared>) -> Result<Json<Value>, ApiError> {
    blocking(svc, |s| Ok(s.metrics())).await.map(Json)
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn guard(State(svc): State<Shared>, req: Request, next: Next) -> Response {
    bump(&svc.counters.requests);
    if let Some(token) = &svc.api_token {
        let expected = format!("Bearer {token}");
        let ok = req.headers().get(header::AUTHORIZATION) == HeaderValue::from_str(&expected).ok().as_ref();
        if !ok && req.uri().path() != "/health" {
            bump(&svc.counters.errors);
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    let resp = next.run(req).await;
    if resp.status().is_client_error() || resp.status().is_server_error() {
        bump(&svc.counters.errors);
    }
    resp
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/fragments", post(add_fragment))
        .route("/pool", get(list_pool))
        .route("/pool/stats", get(pool_stats))
        .route("/pool/snapshot", get(pool_snapshot))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/events", get(events))
        .route("/metrics", get(metrics))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(svc.clone(), guard))
        .with_state(svc)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(svc: Shared, addr: SocketAddr) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn data_paths(data_dir: &Path) -> (PathBuf, PathBuf) {
    (data_dir.join(EVENT_LOG_FILE), data_dir.join(POOL_CONFIG_FILE))
}

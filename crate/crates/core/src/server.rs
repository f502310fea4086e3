//! HTTP label server for human preference collection.
//!
//! Routes live under `/api/v1/` with `/api/` as an alias:
//!
//! * `GET  query`    next query, leased to the caller, or `{"status":"done"}`
//! * `POST label`    `{"query_id", "y"}` with `y` in {0, 0.5, 1}
//! * `POST skip`     `{"query_id"}`; the query goes to the back of the pool
//! * `GET  progress` counters
//!
//! Every accepted label is appended and synced to the preference log before
//! the response is sent.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use crate::env::{Cell, Env};
use crate::error::{Error, Result};
use crate::io::{read_preferences, PreferenceLog};
use crate::model::Segment;
use crate::preference::{PreferenceRecord, Query, TeacherTag};
use crate::tape::check_label;

/// Environment layout for drawing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvView {
    pub id: String,
    pub width: i32,
    pub height: i32,
    pub walls: Vec<Cell>,
    pub goal: Cell,
    pub key: Option<Cell>,
}

impl EnvView {
    pub fn new(env: &Env) -> Self {
        let (width, height) = env.size();
        Self {
            id: env.id().into(),
            width,
            height,
            walls: env.walls().to_vec(),
            goal: env.goal(),
            key: env.key(),
        }
    }
}

/// One side of a query as grid points. Observations only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentView {
    pub trajectory_id: u64,
    pub start: usize,
    pub points: Vec<[f64; 2]>,
    pub actions: Vec<usize>,
}

impl SegmentView {
    fn new(seg: &Segment, env: &EnvView) -> Self {
        let sx = (env.width - 1) as f64;
        let sy = (env.height - 1) as f64;
        Self {
            trajectory_id: seg.trajectory_id,
            start: seg.start,
            points: seg.states.iter().map(|s| [s[0] * sx, s[1] * sy]).collect(),
            actions: seg
                .actions
                .iter()
                .map(|a| a.iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryPayload {
    pub status: String,
    pub query_id: u64,
    pub env: EnvView,
    pub first: SegmentView,
    pub second: SegmentView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub skipped: usize,
    pub pending: usize,
    pub in_flight: usize,
    pub total: usize,
    pub quota: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Stop after this many labels.
    pub quota: Option<usize>,
    /// A served query returns to the pool if not answered within this time.
    pub lease: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            quota: None,
            lease: Duration::from_secs(600),
        }
    }
}

struct Session {
    env: EnvView,
    queries: HashMap<u64, Query>,
    pending: VecDeque<u64>,
    leased: HashMap<u64, Instant>,
    labeled: HashSet<u64>,
    skipped: usize,
    log: PreferenceLog,
    config: ServerConfig,
    finished: watch::Sender<bool>,
}

impl Session {
    fn progress(&self) -> Progress {
        Progress {
            labeled: self.labeled.len(),
            skipped: self.skipped,
            pending: self.pending.len(),
            in_flight: self.leased.len(),
            total: self.queries.len(),
            quota: self.config.quota,
        }
    }

    fn quota_reached(&self) -> bool {
        self.config.quota.is_some_and(|q| self.labeled.len() >= q)
    }

    fn reclaim_expired(&mut self, now: Instant) {
        let lease = self.config.lease;
        let mut expired: Vec<u64> = self
            .leased
            .iter()
            .filter(|(_, &t)| now.duration_since(t) >= lease)
            .map(|(&id, _)| id)
            .collect();
        expired.sort_unstable();
        for id in expired {
            self.leased.remove(&id);
            self.pending.push_back(id);
        }
    }
}

/// Shared server state; clone freely.
#[derive(Clone)]
pub struct LabelServer {
    inner: Arc<Mutex<Session>>,
    finished: watch::Receiver<bool>,
}

impl LabelServer {
    /// Serves `queries` in order. Queries whose id already appears in the
    /// log at `log_path` count as labeled.
    pub fn new(env: &Env, queries: Vec<Query>, log_path: &std::path::Path, config: ServerConfig) -> Result<Self> {
        let log = PreferenceLog::open(log_path, env)?;
        let (_, existing) = read_preferences(log_path)?;
        let mut map = HashMap::new();
        let mut pending = VecDeque::new();
        for q in queries {
            q.validate()?;
            if map.contains_key(&q.id) {
                return Err(Error::Dataset(format!("duplicate query id {}", q.id)));
            }
            pending.push_back(q.id);
            map.insert(q.id, q);
        }
        let labeled: HashSet<u64> = existing.iter().map(|r| r.query.id).filter(|id| map.contains_key(id)).collect();
        pending.retain(|id| !labeled.contains(id));
        let (tx, rx) = watch::channel(false);
        let session = Session {
            env: EnvView::new(env),
            queries: map,
            pending,
            leased: HashMap::new(),
            labeled,
            skipped: 0,
            log,
            config,
            finished: tx,
        };
        let done = session.quota_reached();
        session.finished.send_replace(done);
        Ok(Self {
            inner: Arc::new(Mutex::new(session)),
            finished: rx,
        })
    }

    pub fn progress(&self) -> Progress {
        self.inner.lock().unwrap().progress()
    }

    /// Resolves once the quota is reached.
    pub async fn wait_finished(&self) {
        let mut rx = self.finished.clone();
        let _ = rx.wait_for(|&done| done).await;
    }

    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/query", get(get_query))
            .route("/label", post(post_label))
            .route("/skip", post(post_skip))
            .route("/progress", get(get_progress))
            .with_state(self.clone());
        Router::new().nest("/api/v1", api.clone()).nest("/api", api)
    }
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "status": "error", "error": msg.into() }))).into_response()
}

fn done(progress: Progress) -> Response {
    Json(json!({ "status": "done", "progress": progress })).into_response()
}

async fn get_query(State(server): State<LabelServer>) -> Response {
    let mut s = server.inner.lock().unwrap();
    if s.quota_reached() {
        return done(s.progress());
    }
    s.reclaim_expired(Instant::now());
    let Some(id) = s.pending.pop_front() else {
        return done(s.progress());
    };
    s.leased.insert(id, Instant::now());
    let q = &s.queries[&id];
    Json(QueryPayload {
        status: "query".into(),
        query_id: id,
        env: s.env.clone(),
        first: SegmentView::new(&q.first, &s.env),
        second: SegmentView::new(&q.second, &s.env),
    })
    .into_response()
}

#[derive(Deserialize)]
struct LabelBody {
    query_id: u64,
    y: f64,
}

#[derive(Deserialize)]
struct SkipBody {
    query_id: u64,
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> std::result::Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))
}

async fn post_label(State(server): State<LabelServer>, body: Bytes) -> Response {
    let body: LabelBody = match parse(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    if check_label(body.y).is_err() {
        return error(StatusCode::BAD_REQUEST, format!("y must be 0, 0.5 or 1, got {}", body.y));
    }
    let mut s = server.inner.lock().unwrap();
    let Some(query) = s.queries.get(&body.query_id).cloned() else {
        return error(StatusCode::NOT_FOUND, format!("unknown query {}", body.query_id));
    };
    if s.labeled.contains(&body.query_id) {
        return error(StatusCode::CONFLICT, format!("query {} already labeled", body.query_id));
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let record = match PreferenceRecord::new(query, body.y, TeacherTag::Human, timestamp) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if let Err(e) = s.log.append(&record) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    s.labeled.insert(body.query_id);
    s.leased.remove(&body.query_id);
    s.pending.retain(|&id| id != body.query_id);
    if s.quota_reached() {
        s.finished.send_replace(true);
    }
    Json(json!({ "status": "ok", "query_id": body.query_id, "progress": s.progress() })).into_response()
}

async fn post_skip(State(server): State<LabelServer>, body: Bytes) -> Response {
    let body: SkipBody = match parse(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    let mut s = server.inner.lock().unwrap();
    if !s.queries.contains_key(&body.query_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown query {}", body.query_id));
    }
    if s.labeled.contains(&body.query_id) {
        return error(StatusCode::CONFLICT, format!("query {} already labeled", body.query_id));
    }
    s.leased.remove(&body.query_id);
    s.pending.retain(|&id| id != body.query_id);
    s.pending.push_back(body.query_id);
    s.skipped += 1;
    Json(json!({ "status": "ok", "query_id": body.query_id, "progress": s.progress() })).into_response()
}

async fn get_progress(State(server): State<LabelServer>) -> Response {
    Json(server.progress()).into_response()
}

/// Serves until the quota is reached or ctrl-c, then returns the final
/// counters.
pub async fn serve(listener: tokio::net::TcpListener, server: LabelServer) -> Result<Progress> {
    let app = server.router();
    let stop = server.clone();
    let addr = listener.local_addr().ok();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = stop.wait_finished() => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        })
        .await
        .map_err(|e| Error::io(addr.map(|a| a.to_string()).unwrap_or_default(), e))?;
    Ok(server.progress())
}

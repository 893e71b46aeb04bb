//! HTTP gateway for live sessions.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions?speed=1` | create from a JSON (or TOML, by content type) session config |
//! | GET | `/sessions` | list handles |
//! | GET | `/sessions/{id}` | handle |
//! | DELETE | `/sessions/{id}` | stop and forget |
//! | POST | `/sessions/{id}/control` | `{"action": "start" \| "pause" \| "step" \| "reset" \| "next_trial"}` |
//! | POST | `/sessions/{id}/prompt` | `{"text": ...}`, answered with the prompt record |
//! | GET | `/sessions/{id}/frame` | latest frame |
//! | GET | `/sessions/{id}/stream` | server-sent events, one `frame` event per step |
//! | GET | `/sessions/{id}/trajectory` | NDJSON log so far |
//!
//! `speed` scales real-time pacing (`dt / speed` per step); `speed=0` runs
//! as fast as possible.

pub mod actor;
pub mod api;

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chatmpc_core::error::{EmbeddingError, InterpretError, SessionError};
use chatmpc_core::session::SessionConfig;
use futures_util::Stream;
use serde::Deserialize;
use tokio::sync::{broadcast, oneshot};

use actor::{Command, ControlError, SessionLink};
use api::{ControlRequest, ErrorBody, PromptRequest, SessionHandle, Status, StreamFrame};

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, SessionLink>>>,
    next_id: Arc<AtomicU64>,
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/control", post(control))
        .route("/sessions/{id}/prompt", post(prompt))
        .route("/sessions/{id}/frame", get(frame))
        .route("/sessions/{id}/stream", get(stream))
        .route("/sessions/{id}/trajectory", get(trajectory))
        .with_state(AppState::default())
}

pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    serve_listener(tokio::net::TcpListener::bind(addr).await?).await
}

pub async fn serve_listener(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), path: None } }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }

    fn gone() -> Self {
        Self::new(StatusCode::GONE, "session thread has stopped")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl AppState {
    fn link(&self, id: &str) -> ApiResult<SessionLink> {
        self.sessions.read().expect("registry lock").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

async fn ask<T>(link: &SessionLink, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> ApiResult<T> {
    let (tx, rx) = oneshot::channel();
    link.commands.send(make(tx)).map_err(|_| ApiError::gone())?;
    rx.await.map_err(|_| ApiError::gone())
}

#[derive(Deserialize)]
struct CreateParams {
    #[serde(default = "default_speed")]
    speed: f64,
}

fn default_speed() -> f64 {
    1.0
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn parse_config(headers: &HeaderMap, body: &[u8]) -> ApiResult<SessionConfig> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "body is not UTF-8"))?;
    let toml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.contains("toml"));
    let parsed = if toml { SessionConfig::from_toml(text) } else { SessionConfig::from_json(text) };
    let config = parsed.map_err(|e| match e {
        SessionError::Config { path, message } => {
            ApiError { status: StatusCode::BAD_REQUEST, body: ErrorBody { error: message, path: Some(path) } }
        }
        other => ApiError::new(StatusCode::BAD_REQUEST, other.to_string()),
    })?;
    if config.log.is_some() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody { error: "server-side log paths are not accepted".into(), path: Some("log".into()) },
        });
    }
    Ok(config)
}

async fn create_session(
    State(state): State<AppState>,
    Query(params): Query<CreateParams>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let config = parse_config(&headers, &body)?;
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed) + 1);
    let created_at = now_ms();
    // building the interpreter may call an embedding service; keep it off the runtime
    let (id2, speed) = (id.clone(), params.speed);
    let link = tokio::task::spawn_blocking(move || actor::spawn(id2, created_at, config, speed))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            SessionError::Config { path, message } => {
                ApiError { status: StatusCode::BAD_REQUEST, body: ErrorBody { error: message, path: Some(path) } }
            }
            other => ApiError::new(StatusCode::BAD_REQUEST, other.to_string()),
        })?;
    let handle = ask(&link, Command::Handle).await?;
    state.sessions.write().expect("registry lock").insert(id, link);
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Vec<SessionHandle>>> {
    let links: Vec<(String, SessionLink)> =
        state.sessions.read().expect("registry lock").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let mut out = Vec::new();
    for (_, link) in links {
        if let Ok(h) = ask(&link, Command::Handle).await {
            out.push(h);
        }
    }
    out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
    Ok(Json(out))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionHandle>> {
    let link = state.link(&id)?;
    Ok(Json(ask(&link, Command::Handle).await?))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let link = state.sessions.write().expect("registry lock").remove(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let _ = link.commands.send(Command::Shutdown);
    Ok(StatusCode::NO_CONTENT)
}

async fn control(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ControlRequest>,
) -> ApiResult<Json<SessionHandle>> {
    let link = state.link(&id)?;
    match ask(&link, |tx| Command::Control(req.action, tx)).await? {
        Ok(h) => Ok(Json(h)),
        Err(ControlError::Illegal(m)) => Err(ApiError::new(StatusCode::CONFLICT, m)),
        Err(ControlError::Failed(m)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, m)),
    }
}

async fn prompt(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<PromptRequest>,
) -> ApiResult<Response> {
    let link = state.link(&id)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "prompt text is empty"));
    }
    match ask(&link, |tx| Command::Prompt(req.text, tx)).await? {
        Ok(record) => Ok(Json(record).into_response()),
        Err(SessionError::Config { message, .. }) => Err(ApiError::new(StatusCode::CONFLICT, message)),
        Err(SessionError::Interpret(e @ (InterpretError::EmptyPrompt | InterpretError::Embedding(EmbeddingError::EmptyText)))) => {
            Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
        }
        Err(e) => Err(ApiError::new(StatusCode::BAD_GATEWAY, e.to_string())),
    }
}

async fn frame(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StreamFrame>> {
    let link = state.link(&id)?;
    let latest = link.latest.borrow().clone();
    Ok(Json(latest))
}

async fn trajectory(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let link = state.link(&id)?;
    let log = ask(&link, Command::Trajectory).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], log.to_ndjson()).into_response())
}

struct StreamState {
    rx: broadcast::Receiver<StreamFrame>,
    link: SessionLink,
    run: u32,
    last_k: Option<u64>,
    first: Option<StreamFrame>,
    done: bool,
}

fn is_terminal(f: &StreamFrame) -> bool {
    matches!(f.status, Status::Finished { .. })
}

impl StreamState {
    /// Next frame to send: the current frame on connect, then every step in
    /// order; after a lag, the latest frame.
    async fn next_frame(&mut self) -> Option<StreamFrame> {
        if self.done {
            return None;
        }
        if let Some(f) = self.first.take() {
            return Some(f);
        }
        loop {
            let candidate = match self.rx.recv().await {
                Ok(f) => f,
                Err(broadcast::error::RecvError::Lagged(_)) => self.link.latest.borrow().clone(),
                Err(broadcast::error::RecvError::Closed) => return None,
            };
            if candidate.run != self.run {
                // a reset starts a new run; clients reconnect for it
                return None;
            }
            if self.last_k.is_some_and(|k| candidate.frame.k <= k) {
                continue;
            }
            return Some(candidate);
        }
    }
}

async fn stream(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let link = state.link(&id)?;
    // subscribe before reading the latest frame so no step falls in between
    let rx = link.frames.subscribe();
    let first = link.latest.borrow().clone();
    let st = StreamState { rx, run: first.run, last_k: None, first: Some(first), done: false, link };
    let events = futures_util::stream::unfold(st, |mut st| async move {
        let f = st.next_frame().await?;
        st.last_k = Some(f.frame.k);
        st.done = is_terminal(&f);
        let data = serde_json::to_string(&f).expect("frames serialize");
        Some((Ok(Event::default().event("frame").data(data)), st))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

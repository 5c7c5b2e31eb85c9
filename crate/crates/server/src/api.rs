//! HTTP routes: pipelines, sessions, streamed messages, history and traces.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crskit::monitor::{assemble_graph, assemble_timeline};
use crskit::pipeline::{PipelineError, PipelineKind, PipelineModules, PipelineOutput, RespondOptions};
use crskit::protocol::Role;
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::{mpsc, watch};
use tokio_util::sync::CancellationToken;

use crate::state::{AppState, ChatMessage, Flight, Mode, SessionHandle};

/// How long `stop` waits for the cancelled generation to settle.
const STOP_WAIT: Duration = Duration::from_secs(5);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineInfo {
    pub id: String,
    pub name: String,
    pub kind: PipelineKind,
    pub modules: PipelineModules,
    pub default_kwargs: Value,
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub pipeline_id: String,
    pub mode: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub kwargs: Option<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stopped {
    pub stopped: bool,
}

/// Session snapshot returned by refresh and history download.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryDoc {
    pub session_id: String,
    pub pipeline_id: String,
    pub mode: Mode,
    pub messages: Vec<ChatMessage>,
}

/// Payload of the final `done` event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DonePayload {
    pub text: String,
    pub recommendations: crskit::module::RecList,
    pub user_turn: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/pipelines", get(list_pipelines))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{sid}", axum::routing::delete(refresh_session))
        .route("/api/sessions/{sid}/messages", post(post_message))
        .route("/api/sessions/{sid}/stop", post(stop))
        .route("/api/sessions/{sid}/history", get(history))
        .route("/api/traces/{trace_id}", get(trace))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Periodically drops idle sessions.
pub fn spawn_sweeper(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let period = (state.ttl() / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let dropped = state.sweep(std::time::Instant::now());
            if dropped > 0 {
                tracing::info!(dropped, "expired idle sessions");
            }
        }
    })
}

async fn list_pipelines(State(state): State<Arc<AppState>>) -> Json<Vec<PipelineInfo>> {
    Json(
        state
            .pipelines()
            .iter()
            .map(|slot| PipelineInfo {
                id: slot.id.clone(),
                name: slot.pipeline.name().to_string(),
                kind: slot.pipeline.config().kind,
                modules: slot.pipeline.modules(),
                default_kwargs: slot.pipeline.default_kwargs(),
            })
            .collect(),
    )
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<Json<SessionCreated>> {
    let Json(req) = body?;
    if state.pipeline(&req.pipeline_id).is_none() {
        return Err(ApiError::not_found("pipeline", &req.pipeline_id));
    }
    let mode = Mode::parse(&req.mode).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("mode must be \"info\" or \"debug\", got {:?}", req.mode),
        )
    })?;
    Ok(Json(SessionCreated {
        session_id: state.create_session(&req.pipeline_id, mode),
    }))
}

fn find_session(state: &AppState, sid: &str) -> ApiResult<SessionHandle> {
    state.session(sid).ok_or_else(|| ApiError::not_found("session", sid))
}

fn snapshot(handle: &SessionHandle) -> HistoryDoc {
    let s = handle.lock();
    HistoryDoc {
        session_id: s.id.clone(),
        pipeline_id: s.pipeline_id.clone(),
        mode: s.mode,
        messages: s.history.clone(),
    }
}

async fn refresh_session(State(state): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<HistoryDoc>> {
    let handle = find_session(&state, &sid)?;
    {
        let mut s = handle.lock();
        if let Some(f) = s.in_flight.take() {
            f.cancel.cancel();
        }
        s.epoch += 1;
        s.history.clear();
    }
    Ok(Json(snapshot(&handle)))
}

async fn history(State(state): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Response> {
    let handle = find_session(&state, &sid)?;
    let disposition = format!("attachment; filename=\"chat-{sid}.json\"");
    Ok(([(header::CONTENT_DISPOSITION, disposition)], Json(snapshot(&handle))).into_response())
}

async fn stop(State(state): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<Stopped>> {
    let handle = find_session(&state, &sid)?;
    let flight = {
        let s = handle.lock();
        s.in_flight.as_ref().map(|f| (f.cancel.clone(), f.done.clone()))
    };
    let Some((cancel, mut done)) = flight else {
        return Ok(Json(Stopped { stopped: false }));
    };
    cancel.cancel();
    // The generation task clears `in_flight` itself; waiting here means a
    // new message can be posted as soon as stop returns.
    let _ = tokio::time::timeout(STOP_WAIT, done.wait_for(|d| *d)).await;
    Ok(Json(Stopped { stopped: true }))
}

async fn trace(State(state): State<Arc<AppState>>, Path(trace_id): Path<String>) -> ApiResult<Json<Value>> {
    match state.trace_mode(&trace_id) {
        None => return Err(ApiError::not_found("trace", &trace_id)),
        Some(Mode::Info) => {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "traces are only available to debug-mode sessions",
            ))
        }
        Some(Mode::Debug) => {}
    }
    let t = state
        .monitor()
        .get(&trace_id)
        .ok_or_else(|| ApiError::not_found("trace", &trace_id))?;
    let internal = |e: crskit::monitor::MonitorError| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let timeline = assemble_timeline(&t).map_err(internal)?;
    let graph = assemble_graph(&t).map_err(internal)?;
    Ok(Json(json!({
        "trace_id": t.trace_id,
        "spans": t.spans,
        "timeline": timeline,
        "graph": graph,
    })))
}

fn error_kind(e: &PipelineError) -> &'static str {
    match e {
        PipelineError::Protocol(_) => "protocol",
        PipelineError::Config(_) => "config",
        PipelineError::Kwargs(_) => "kwargs",
        PipelineError::Module { .. } => "module",
        PipelineError::InsufficientRecommendations { .. } => "insufficient_recommendations",
    }
}

fn event(name: &str, data: &impl Serialize) -> Event {
    Event::default()
        .event(name)
        .json_data(data)
        .expect("event payloads serialize")
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(sid): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let handle = find_session(&state, &sid)?;
    let Json(req) = body?;
    let kwargs = match req.kwargs {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "kwargs must be an object")),
    };

    let cancel = CancellationToken::new();
    let (done_tx, done_rx) = watch::channel(false);
    let (dialog, pipeline, mode, epoch) = {
        let mut s = handle.lock();
        if s.in_flight.is_some() {
            return Err(ApiError::new(StatusCode::CONFLICT, "a generation is already in flight"));
        }
        let dialog = s
            .dialog_with(&req.text)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        let pipeline = state
            .pipeline(&s.pipeline_id)
            .expect("sessions reference registered pipelines")
            .pipeline
            .clone();
        s.in_flight = Some(Flight {
            cancel: cancel.clone(),
            done: done_rx,
        });
        (dialog, pipeline, s.mode, s.epoch)
    };

    let (events, rx) = mpsc::unbounded_channel::<Event>();
    tokio::spawn(async move {
        let (chunk_tx, mut chunk_rx) = mpsc::unbounded_channel::<String>();
        let opts = RespondOptions {
            kwargs,
            chunks: Some(chunk_tx),
            cancel: cancel.clone(),
        };
        let forward = {
            let events = events.clone();
            async move {
                while let Some(c) = chunk_rx.recv().await {
                    let _ = events.send(event("chunk", &json!({ "text": c })));
                }
            }
        };
        // Dropping the pipeline future on cancel closes its open spans and
        // frees the chunk sender, which ends the forwarder.
        let respond = async {
            tokio::select! {
                biased;
                _ = cancel.cancelled() => None,
                out = pipeline.respond(&dialog, opts) => Some(out),
            }
        };
        let (result, ()) = tokio::join!(respond, forward);
        let final_event = settle(&state, &handle, epoch, mode, result);
        let _ = done_tx.send(true);
        let _ = events.send(final_event);
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|e| (Ok(e), rx)) });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Commits a finished generation to history and builds the closing event.
fn settle(
    state: &AppState,
    handle: &SessionHandle,
    epoch: u64,
    mode: Mode,
    result: Option<Result<PipelineOutput, PipelineError>>,
) -> Event {
    let mut s = handle.lock();
    let current = s.epoch == epoch;
    if current {
        s.in_flight = None;
    }
    match result {
        Some(Ok(out)) if current => {
            state.record_trace(&out.trace_id, mode);
            let trace_id = (mode == Mode::Debug).then(|| out.trace_id.clone());
            s.history.push(ChatMessage {
                role: Role::User,
                text: out.user_turn.clone(),
                recommendations: Vec::new(),
                trace_id: None,
            });
            s.history.push(ChatMessage {
                role: Role::System,
                text: out.text.clone(),
                recommendations: out.recommendations.clone(),
                trace_id: trace_id.clone(),
            });
            event(
                "done",
                &DonePayload {
                    text: out.text,
                    recommendations: out.recommendations,
                    user_turn: out.user_turn,
                    trace_id,
                },
            )
        }
        Some(Err(e)) if !e.is_cancelled() => {
            tracing::debug!(error = %e, "generation failed");
            event("error", &json!({ "error": e.to_string(), "kind": error_kind(&e) }))
        }
        _ => event("error", &json!({ "error": "generation stopped", "kind": "cancelled" })),
    }
}

//! Loopback stub servers for hermetic tests: an in-memory artifact hub and a
//! scripted chat-completion endpoint. Also independent reference
//! implementations (oracles) and random input generators.

pub mod gen;
pub mod oracle;

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

/// A server bound to an ephemeral loopback port; stops on drop.
#[derive(Debug)]
pub struct StubServer {
    pub url: String,
    handle: JoinHandle<()>,
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn serve(router: Router) -> StubServer {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind loopback");
    let addr = listener.local_addr().expect("local addr");
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    StubServer {
        url: format!("http://{addr}"),
        handle,
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
}

type FileStore = Arc<Mutex<HashMap<String, Vec<u8>>>>;

#[derive(Clone)]
struct HubState {
    token: String,
    files: FileStore,
}

/// In-memory hub keyed by `name/relpath`. PUT requires the bearer token.
#[derive(Debug)]
pub struct StubHub {
    pub server: StubServer,
    pub files: FileStore,
}

impl StubHub {
    pub async fn spawn(token: &str) -> StubHub {
        let files = FileStore::default();
        let state = HubState {
            token: token.to_string(),
            files: files.clone(),
        };
        let router = Router::new()
            .route("/{name}/{*path}", get(hub_get).put(hub_put))
            .with_state(state);
        StubHub {
            server: serve(router).await,
            files,
        }
    }

    pub fn url(&self) -> &str {
        &self.server.url
    }
}

async fn hub_get(State(s): State<HubState>, Path((name, path)): Path<(String, String)>) -> Response {
    match s.files.lock().get(&format!("{name}/{path}")) {
        Some(bytes) => bytes.clone().into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn hub_put(
    State(s): State<HubState>,
    Path((name, path)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> StatusCode {
    match bearer(&headers) {
        None => StatusCode::UNAUTHORIZED,
        Some(t) if t != s.token => StatusCode::FORBIDDEN,
        Some(_) => {
            s.files.lock().insert(format!("{name}/{path}"), body.to_vec());
            StatusCode::CREATED
        }
    }
}

/// Behaviour of the stub chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct LlmScript {
    /// Content deltas to stream.
    pub chunks: Vec<String>,
    /// Stream the user prompt back as a single delta instead of `chunks`.
    pub echo_prompt: bool,
    /// Number of initial requests answered with `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Pause before each streamed delta.
    pub chunk_delay: Duration,
}

impl Default for LlmScript {
    fn default() -> Self {
        LlmScript {
            chunks: vec!["Hello".into(), " there".into(), "!".into()],
            echo_prompt: false,
            fail_first: 0,
            fail_status: 500,
            chunk_delay: Duration::ZERO,
        }
    }
}

#[derive(Clone)]
struct LlmState {
    script: LlmScript,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    keys: Arc<Mutex<Vec<Option<String>>>>,
}

#[derive(Debug)]
pub struct StubLlm {
    pub server: StubServer,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    keys: Arc<Mutex<Vec<Option<String>>>>,
}

impl StubLlm {
    pub async fn spawn(script: LlmScript) -> StubLlm {
        let state = LlmState {
            script,
            requests: Arc::default(),
            bodies: Arc::default(),
            keys: Arc::default(),
        };
        let (requests, bodies, keys) = (state.requests.clone(), state.bodies.clone(), state.keys.clone());
        let router = Router::new()
            .route("/chat/completions", post(llm_complete))
            .with_state(state);
        StubLlm {
            server: serve(router).await,
            requests,
            bodies,
            keys,
        }
    }

    pub fn url(&self) -> &str {
        &self.server.url
    }

    /// Requests received so far, failures included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().clone()
    }

    pub fn bearer_tokens(&self) -> Vec<Option<String>> {
        self.keys.lock().clone()
    }
}

fn sse_delta(text: &str) -> String {
    format!("data: {}\n\n", json!({"choices": [{"delta": {"content": text}}]}))
}

async fn llm_complete(State(s): State<LlmState>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let n = s.requests.fetch_add(1, Ordering::SeqCst);
    s.bodies.lock().push(body.clone());
    s.keys.lock().push(bearer(&headers).map(str::to_string));
    if n < s.script.fail_first {
        let status = StatusCode::from_u16(s.script.fail_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, "scripted failure").into_response();
    }
    let deltas: Vec<String> = if s.script.echo_prompt {
        let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
        vec![prompt.to_string()]
    } else {
        s.script.chunks.clone()
    };
    let delay = s.script.chunk_delay;
    let events = futures::stream::iter(deltas.into_iter().map(|d| sse_delta(&d)))
        .then(move |event| async move {
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
            event
        })
        .chain(futures::stream::once(async { "data: [DONE]\n\n".to_string() }))
        .map(Ok::<_, Infallible>);
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .body(Body::from_stream(events))
        .expect("valid response")
}

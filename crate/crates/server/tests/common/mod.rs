//! Loopback service fixture and SSE helpers shared by the server test targets.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use crskit::demo;
use crskit::generator::GenStyle;
use crskit::module::Module;
use crskit::pipeline::{Pipeline, PipelineConfig, PipelineKind};
use crskit_server::{router, AppState};
use futures::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};

pub struct TestServer {
    pub base: String,
    pub client: reqwest::Client,
    pub state: Arc<AppState>,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub event: String,
    pub data: Value,
}

impl TestServer {
    pub async fn spawn(pipelines: Vec<(String, Pipeline)>) -> Self {
        let state = Arc::new(AppState::new(pipelines, Duration::from_secs(3600)));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = router(state.clone(), None);
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        TestServer {
            base,
            client: reqwest::Client::new(),
            state,
            task,
        }
    }

    /// Expansion and fill-blank demo pipelines with template generators.
    pub async fn offline() -> Self {
        Self::spawn(vec![
            ("expansion".into(), demo::template_pipeline(PipelineKind::Expansion)),
            ("fillblank".into(), demo::template_pipeline(PipelineKind::Fillblank)),
        ])
        .await
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }

    pub async fn post(&self, path: &str, body: Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(&body).send().await.unwrap()
    }

    pub async fn delete(&self, path: &str) -> reqwest::Response {
        self.client.delete(self.url(path)).send().await.unwrap()
    }

    pub async fn session(&self, pipeline_id: &str, mode: &str) -> String {
        let r = self
            .post("/api/sessions", json!({"pipeline_id": pipeline_id, "mode": mode}))
            .await;
        assert_eq!(r.status(), StatusCode::OK);
        r.json::<Value>().await.unwrap()["session_id"].as_str().unwrap().to_string()
    }

    pub async fn message_response(&self, sid: &str, text: &str, kwargs: Value) -> reqwest::Response {
        self.post(
            &format!("/api/sessions/{sid}/messages"),
            json!({"text": text, "kwargs": kwargs}),
        )
        .await
    }

    /// Sends a message and collects the whole SSE stream.
    pub async fn message(&self, sid: &str, text: &str, kwargs: Value) -> (StatusCode, Vec<SseEvent>) {
        let r = self.message_response(sid, text, kwargs).await;
        let status = r.status();
        let body = r.text().await.unwrap();
        if !status.is_success() {
            return (status, Vec::new());
        }
        (status, parse_sse(&body))
    }

    pub async fn history(&self, sid: &str) -> Value {
        let r = self.get(&format!("/api/sessions/{sid}/history")).await;
        assert_eq!(r.status(), StatusCode::OK);
        r.json().await.unwrap()
    }
}

pub fn parse_sse(body: &str) -> Vec<SseEvent> {
    body.split("\n\n")
        .filter_map(|block| {
            let mut event = None;
            let mut data = String::new();
            for line in block.lines() {
                if let Some(e) = line.strip_prefix("event:") {
                    event = Some(e.trim().to_string());
                } else if let Some(d) = line.strip_prefix("data:") {
                    data.push_str(d.strip_prefix(' ').unwrap_or(d));
                }
            }
            Some(SseEvent {
                event: event?,
                data: serde_json::from_str(&data).ok()?,
            })
        })
        .collect()
}

/// Incremental SSE reader over a streaming response.
pub struct SseReader {
    stream: futures::stream::BoxStream<'static, reqwest::Result<bytes::Bytes>>,
    buf: String,
}

impl SseReader {
    pub fn new(r: reqwest::Response) -> Self {
        SseReader {
            stream: r.bytes_stream().boxed(),
            buf: String::new(),
        }
    }

    /// Next event, or `None` once the stream has ended.
    pub async fn next(&mut self) -> Option<SseEvent> {
        loop {
            if let Some(at) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..at + 2).collect();
                if let Some(e) = parse_sse(&block).pop() {
                    return Some(e);
                }
                continue;
            }
            let bytes = self.stream.next().await?.ok()?;
            self.buf.push_str(&String::from_utf8_lossy(&bytes));
        }
    }
}

/// An expansion pipeline whose generator streams from a chat-completion endpoint.
pub fn llm_pipeline(name: &str, base_url: &str) -> Pipeline {
    std::env::set_var(demo::API_KEY_ENV, "test-key");
    let rec: Arc<dyn Module> = Arc::new(demo::recommender("demo-rec", 7));
    let gen: Arc<dyn Module> = Arc::new(demo::llm_generator(
        &format!("{name}-gen"),
        GenStyle::Expansion,
        base_url,
        "stub-model",
    ));
    Pipeline::new(name, PipelineConfig::new(PipelineKind::Expansion), rec, gen, None).unwrap()
}

//! Streaming chat-completion client.
//!
//! Speaks the common `POST {base_url}/chat/completions` convention with
//! `stream: true` and reads `data: {json}` event-stream lines until
//! `data: [DONE]`.

use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_util::sync::CancellationToken;

use super::GenError;

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

fn default_temperature() -> f64 {
    0.7
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never stored in config.
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// First retry delay; doubles per attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        LlmEndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            temperature: default_temperature(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.base_url.trim().is_empty() {
            return Err(GenError::InvalidConfig("base_url is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GenError::InvalidConfig("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

/// One streamed fragment. The final chunk has `is_final` set and empty text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenChunk {
    pub text: String,
    pub is_final: bool,
}

/// Per-call overrides (runtime model selection, temperature).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenOverrides {
    pub model: Option<String>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LlmClient {
    cfg: LlmEndpointConfig,
    http: reqwest::Client,
}

impl LlmClient {
    pub fn new(cfg: LlmEndpointConfig) -> Result<Self, GenError> {
        cfg.validate()?;
        let timeout = Duration::from_millis(cfg.timeout_ms);
        let http = reqwest::Client::builder()
            .connect_timeout(timeout)
            .read_timeout(timeout)
            .build()
            .map_err(|e| GenError::Transport(e.to_string()))?;
        Ok(LlmClient { cfg, http })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.cfg
    }

    fn api_key(&self) -> Result<String, GenError> {
        std::env::var(&self.cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GenError::MissingApiKey(self.cfg.api_key_env.clone()))
    }

    /// Opens a completion stream, retrying transport failures and 5xx
    /// responses with exponential backoff. Nothing touches the network when
    /// the API key variable is unset.
    pub async fn generate(
        &self,
        prompt: &str,
        overrides: &GenOverrides,
        cancel: &CancellationToken,
    ) -> Result<GenStream, GenError> {
        let key = self.api_key()?;
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({
            "model": overrides.model.as_deref().unwrap_or(&self.cfg.model),
            "temperature": overrides.temperature.unwrap_or(self.cfg.temperature),
            "stream": true,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut attempt = 0u32;
        loop {
            let sent = tokio::select! {
                _ = cancel.cancelled() => return Err(GenError::Cancelled),
                r = self.http.post(&url).bearer_auth(&key).json(&body).send() => r,
            };
            let failure = match sent {
                Ok(resp) if resp.status().is_success() => return Ok(GenStream::new(resp)),
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let body = resp.text().await.unwrap_or_default();
                    let err = GenError::Remote { status, body };
                    if status < 500 {
                        return Err(err);
                    }
                    err
                }
                Err(e) => GenError::Transport(e.to_string()),
            };
            if attempt >= self.cfg.max_retries {
                return Err(failure);
            }
            let delay = Duration::from_millis(self.cfg.backoff_base_ms << attempt.min(16));
            attempt += 1;
            tokio::select! {
                _ = cancel.cancelled() => return Err(GenError::Cancelled),
                _ = tokio::time::sleep(delay) => {}
            }
        }
    }

    /// Streams to completion, calling `on_chunk` per fragment, and returns
    /// the assembled text. Partial text is discarded on cancellation.
    pub async fn generate_text(
        &self,
        prompt: &str,
        overrides: &GenOverrides,
        cancel: &CancellationToken,
        mut on_chunk: impl FnMut(&str),
    ) -> Result<String, GenError> {
        let mut stream = self.generate(prompt, overrides, cancel).await?;
        let mut text = String::new();
        loop {
            let next = tokio::select! {
                _ = cancel.cancelled() => return Err(GenError::Cancelled),
                c = stream.next_chunk() => c,
            };
            match next {
                None => break,
                Some(Err(e)) => return Err(e),
                Some(Ok(chunk)) if chunk.is_final => break,
                Some(Ok(chunk)) => {
                    on_chunk(&chunk.text);
                    text.push_str(&chunk.text);
                }
            }
        }
        Ok(text)
    }
}

type ByteStream = futures::stream::BoxStream<'static, reqwest::Result<bytes::Bytes>>;

/// Incremental reader over an event-stream response body.
pub struct GenStream {
    body: ByteStream,
    buf: Vec<u8>,
    /// Non-streaming JSON body fallback: the whole reply arrives at once.
    json_body: bool,
    finished: bool,
}

impl std::fmt::Debug for GenStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenStream").field("finished", &self.finished).finish()
    }
}

impl GenStream {
    fn new(resp: reqwest::Response) -> Self {
        let json_body = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|ct| ct.starts_with("application/json"));
        GenStream {
            body: resp.bytes_stream().boxed(),
            buf: Vec::new(),
            json_body,
            finished: false,
        }
    }

    /// Next fragment; `None` once the final chunk has been returned.
    pub async fn next_chunk(&mut self) -> Option<Result<GenChunk, GenError>> {
        if self.finished {
            return None;
        }
        if self.json_body {
            return Some(self.read_json_body().await);
        }
        loop {
            while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=pos).collect();
                let line = String::from_utf8_lossy(&line);
                match parse_sse_line(line.trim_end_matches(['\n', '\r'])) {
                    Ok(SseLine::Skip) => continue,
                    Ok(SseLine::Delta(text)) if text.is_empty() => continue,
                    Ok(SseLine::Delta(text)) => return Some(Ok(GenChunk { text, is_final: false })),
                    Ok(SseLine::Done) => return Some(Ok(self.finish())),
                    Err(e) => {
                        self.finished = true;
                        return Some(Err(e));
                    }
                }
            }
            match self.body.next().await {
                Some(Ok(bytes)) => self.buf.extend_from_slice(&bytes),
                Some(Err(e)) => {
                    self.finished = true;
                    return Some(Err(GenError::Transport(e.to_string())));
                }
                // Stream closed without [DONE]; treat as end of reply.
                None => return Some(Ok(self.finish())),
            }
        }
    }

    fn finish(&mut self) -> GenChunk {
        self.finished = true;
        GenChunk {
            text: String::new(),
            is_final: true,
        }
    }

    async fn read_json_body(&mut self) -> Result<GenChunk, GenError> {
        while let Some(bytes) = self.body.next().await {
            self.buf
                .extend_from_slice(&bytes.map_err(|e| GenError::Transport(e.to_string()))?);
        }
        self.json_body = false;
        let v: Value = serde_json::from_slice(&self.buf).map_err(|e| GenError::BadStream(e.to_string()))?;
        self.buf.clear();
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GenError::BadStream("missing choices[0].message.content".into()))?;
        Ok(GenChunk {
            text: text.to_string(),
            is_final: false,
        })
    }
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum SseLine {
    Skip,
    Delta(String),
    Done,
}

pub(crate) fn parse_sse_line(line: &str) -> Result<SseLine, GenError> {
    let Some(data) = line.strip_prefix("data:") else {
        // Blank separators, comments, `event:`/`id:` fields.
        return Ok(SseLine::Skip);
    };
    let data = data.strip_prefix(' ').unwrap_or(data);
    if data == "[DONE]" {
        return Ok(SseLine::Done);
    }
    let v: Value = serde_json::from_str(data).map_err(|e| GenError::BadStream(format!("{e}: {data}")))?;
    if let Some(err) = v.get("error") {
        return Err(GenError::Remote {
            status: 200,
            body: err.to_string(),
        });
    }
    let delta = v["choices"][0]["delta"]["content"].as_str().unwrap_or_default();
    Ok(SseLine::Delta(delta.to_string()))
}

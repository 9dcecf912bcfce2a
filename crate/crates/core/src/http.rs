//! Blocking client for OpenAI-compatible endpoints.
//!
//! Transport failures, HTTP 429 and 5xx responses are retried with
//! exponential backoff. Chat calls go through the [`ChatTransport`] trait so
//! that recorded exchanges can be replayed offline ([`ReplayChat`]) and live
//! exchanges can be logged as fixtures ([`RecordingChat`]).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::hashing::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay_ms: 500,
            max_delay_ms: 8_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.initial_delay_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_delay_ms as f64) as u64)
    }
}

/// Where and how to reach an OpenAI-compatible server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("unexpected response shape: {0}")]
    Decode(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("no recorded response for request {0}")]
    NotRecorded(String),
    #[error("fixture I/O on {}: {message}", path.display())]
    Fixture { path: PathBuf, message: String },
}

impl ApiError {
    /// Whether another attempt could succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            ApiError::Transport { .. } => true,
            ApiError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub struct ApiClient {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    requests: AtomicUsize,
}

impl ApiClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ApiError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ApiError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ApiError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            http,
            base_url: cfg.base_url.trim_end_matches('/').to_owned(),
            api_key,
            retry: cfg.retry,
            requests: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, ApiError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = self.post_once(&url, body, attempt);
            match result {
                Err(e) if e.is_retriable() && attempt <= self.retry.max_retries => {
                    let wait = self.retry.delay(attempt - 1);
                    tracing::warn!("{url}: {e}; retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value, attempt: u32) -> Result<Value, ApiError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.http.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ApiError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ApiError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(ApiError::Status {
                status: status.as_u16(),
                attempts: attempt,
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| ApiError::Decode(format!("{e}: {text}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Content hash of the full request; the replay key.
    pub fn key(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("request serializes"))
    }
}

pub trait ChatTransport: Send + Sync {
    /// Returns the assistant message content of the first choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, ApiError>;
}

/// Live chat completions over HTTP.
pub struct HttpChat {
    client: ApiClient,
}

impl HttpChat {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ApiError> {
        Ok(Self {
            client: ApiClient::new(cfg)?,
        })
    }

    pub fn request_count(&self) -> usize {
        self.client.request_count()
    }
}

impl ChatTransport for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ApiError> {
        let body = serde_json::to_value(request).expect("request serializes");
        let resp = self.client.post_json("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ApiError::Decode(format!("no choices[0].message.content in {resp}")))
    }
}

/// One line of a fixture / audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub key: String,
    pub request: ChatRequest,
    pub response: String,
}

fn read_exchanges(path: &Path) -> Result<Vec<RecordedExchange>, ApiError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(ApiError::Fixture {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| ApiError::Fixture {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted append is skipped.
        match serde_json::from_str(&line) {
            Ok(x) => out.push(x),
            Err(e) => tracing::warn!("{}: skipping unreadable line: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Serves chat responses from a recorded fixture file; never touches the
/// network.
pub struct ReplayChat {
    responses: HashMap<String, String>,
}

impl ReplayChat {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ApiError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ApiError::Fixture {
                path: path.to_path_buf(),
                message: "fixture file not found".into(),
            });
        }
        Ok(Self::from_exchanges(read_exchanges(path)?))
    }

    pub fn from_exchanges(exchanges: impl IntoIterator<Item = RecordedExchange>) -> Self {
        Self {
            responses: exchanges.into_iter().map(|x| (x.key, x.response)).collect(),
        }
    }
}

impl ChatTransport for ReplayChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ApiError> {
        let key = request.key();
        self.responses.get(&key).cloned().ok_or(ApiError::NotRecorded(key))
    }
}

/// Wraps a transport with a content-addressed audit log. Requests already in
/// the log are answered from it; new exchanges are appended, so the log
/// doubles as a replay fixture.
pub struct RecordingChat<T> {
    inner: T,
    path: PathBuf,
    seen: RwLock<HashMap<String, String>>,
    log: Mutex<File>,
    upstream_calls: AtomicUsize,
}

impl<T: ChatTransport> RecordingChat<T> {
    pub fn open(inner: T, path: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let path = path.into();
        let fixture_err = |e: std::io::Error| ApiError::Fixture {
            path: path.clone(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(fixture_err)?;
        }
        let seen = read_exchanges(&path)?
            .into_iter()
            .map(|x| (x.key, x.response))
            .collect();
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(fixture_err)?;
        Ok(Self {
            inner,
            path,
            seen: RwLock::new(seen),
            log: Mutex::new(log),
            upstream_calls: AtomicUsize::new(0),
        })
    }

    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::Relaxed)
    }
}

impl<T: ChatTransport> ChatTransport for RecordingChat<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ApiError> {
        let key = request.key();
        if let Some(hit) = self.seen.read().expect("lock").get(&key) {
            return Ok(hit.clone());
        }
        self.upstream_calls.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.complete(request)?;
        let line = serde_json::to_string(&RecordedExchange {
            key: key.clone(),
            request: request.clone(),
            response: response.clone(),
        })
        .expect("exchange serializes");
        {
            let mut log = self.log.lock().expect("lock");
            writeln!(log, "{line}").map_err(|e| ApiError::Fixture {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        }
        self.seen.write().expect("lock").insert(key, response.clone());
        Ok(response)
    }
}

/// Builds a JSON body for an OpenAI-style chat response; used by fixtures
/// and fake servers.
pub fn chat_response_body(content: &str) -> Value {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
}

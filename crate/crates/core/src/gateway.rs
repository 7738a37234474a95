//! Client for OpenAI-compatible chat-completion endpoints, and an in-process
//! mock server for tests.
//!
//! The client bounds in-flight requests with a semaphore and retries
//! 429, 5xx, timeouts and transport failures with jittered exponential
//! backoff. Any other 4xx fails immediately.

use std::collections::VecDeque;
use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "SYNTHEMBED_API_KEY";
pub const COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("endpoint returned non-retryable status {status}")]
    NonRetryable { status: u16, attempts: usize },
    #[error("gave up after {attempts} attempts (last status: {})", last_status.map_or("none".to_string(), |s| s.to_string()))]
    Exhausted {
        attempts: usize,
        last_status: Option<u16>,
        last_error: String,
    },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
}

/// A string that never shows up in `Debug` or `Display` output.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0.is_empty() { "Secret(<unset>)" } else { "Secret(<redacted>)" })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Never serialized; filled from `api_key_env` by [`GatewayConfig::with_env_key`].
    #[serde(skip)]
    pub api_key: Secret,
    pub api_key_env: String,
    pub max_concurrent: usize,
    pub max_retries: usize,
    pub backoff_base_ms: u64,
    pub request_timeout_ms: u64,
    pub jitter_seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://127.0.0.1:8000".to_string(),
            api_key: Secret::default(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_concurrent: 8,
            max_retries: 3,
            backoff_base_ms: 200,
            request_timeout_ms: 60_000,
            jitter_seed: 0,
        }
    }
}

impl GatewayConfig {
    pub fn for_url(base_url: impl Into<String>) -> Self {
        GatewayConfig {
            base_url: base_url.into(),
            ..Default::default()
        }
    }

    /// Reads the API key from the configured environment variable, if set.
    pub fn with_env_key(mut self) -> Self {
        if let Ok(key) = std::env::var(&self.api_key_env) {
            self.api_key = Secret::new(key);
        }
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad("base_url must start with http:// or https://");
        }
        if self.max_concurrent == 0 {
            return bad("max_concurrent must be >= 1");
        }
        if self.backoff_base_ms == 0 || self.request_timeout_ms == 0 {
            return bad("backoff_base_ms and request_timeout_ms must be positive");
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}{COMPLETIONS_PATH}", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        match self.messages.last() {
            None => return bad("messages must not be empty"),
            Some(m) if m.role != Role::User => return bad("last message must come from the user"),
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

/// Parses the first choice of a chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<ChatResponse, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| malformed("no choices"))?;
    let content = choice.pointer("/message/content").and_then(Value::as_str);
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    if finish_reason == FinishReason::Stop && content.is_none() {
        return Err(malformed("choice has no message content"));
    }
    let count = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        content: content.unwrap_or_default().to_string(),
        finish_reason,
        usage: Usage {
            prompt_tokens: count("prompt_tokens"),
            completion_tokens: count("completion_tokens"),
        },
    })
}

/// Anything that can answer a chat request; the synthesis pipeline is generic over it.
pub trait ChatBackend: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self(request)
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            available: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(ChatResponse),
    Retry { status: Option<u16>, error: String },
    Fatal(GatewayError),
}

/// A configured client, shareable across threads.
pub struct Gateway {
    config: GatewayConfig,
    agent: ureq::Agent,
    permits: Semaphore,
    jitter: Mutex<ChaCha8Rng>,
}

/// A successful call and the number of HTTP attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completed {
    pub response: ChatResponse,
    pub attempts: usize,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .build()
            .into();
        Ok(Gateway {
            permits: Semaphore::new(config.max_concurrent),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(config.jitter_seed)),
            agent,
            config,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Delay before retry number `attempt + 1`: `base · 2^attempt`, scaled by a factor in [0.5, 1.5).
    pub fn backoff_delay(&self, attempt: usize) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt.min(30) as i32);
        let factor = 0.5 + self.jitter.lock().expect("jitter lock").random::<f64>();
        Duration::from_secs_f64(base * factor / 1000.0)
    }

    fn attempt(&self, body: &str) -> Attempt {
        let _permit = self.permits.acquire();
        let mut req = self.agent.post(self.config.endpoint()).header("Content-Type", "application/json");
        if !self.config.api_key.is_empty() {
            req = req.header("Authorization", format!("Bearer {}", self.config.api_key.expose()));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200..=299, Ok(text)) => match parse_chat_response(&text) {
                        Ok(r) => Attempt::Done(r),
                        Err(e) => Attempt::Fatal(e),
                    },
                    (200..=299, Err(e)) => Attempt::Retry {
                        status: Some(status),
                        error: format!("reading body: {e}"),
                    },
                    (429 | 500..=599, _) => Attempt::Retry {
                        status: Some(status),
                        error: format!("status {status}"),
                    },
                    _ => Attempt::Fatal(GatewayError::NonRetryable { status, attempts: 0 }),
                }
            }
            // Timeouts and transport failures are retried alike.
            Err(e) => Attempt::Retry {
                status: None,
                error: e.to_string(),
            },
        }
    }

    pub fn chat_complete_counted(&self, request: &ChatRequest) -> Result<Completed, GatewayError> {
        request.validate()?;
        let body = serde_json::to_string(request).expect("request serialization is infallible");
        let mut last = (None, String::new());
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff_delay(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(response) => {
                    return Ok(Completed {
                        response,
                        attempts: attempt + 1,
                    })
                }
                Attempt::Fatal(GatewayError::NonRetryable { status, .. }) => {
                    return Err(GatewayError::NonRetryable {
                        status,
                        attempts: attempt + 1,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { status, error } => {
                    log::debug!("attempt {} failed: {error}", attempt + 1);
                    last = (status, error);
                }
            }
        }
        Err(GatewayError::Exhausted {
            attempts: self.config.max_retries + 1,
            last_status: last.0,
            last_error: last.1,
        })
    }

    pub fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.chat_complete_counted(request).map(|c| c.response)
    }
}

impl ChatBackend for Gateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.chat_complete(request)
    }
}

/// One canned reply of the mock server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockResponse {
    /// A 200 chat-completions body whose first choice carries `content`.
    pub fn chat(content: &str) -> Self {
        let body = serde_json::json!({
            "id": "mock",
            "object": "chat.completion",
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop"
            }],
            "usage": {"prompt_tokens": 0, "completion_tokens": content.split_whitespace().count()}
        });
        MockResponse {
            status: 200,
            body: body.to_string(),
            delay_ms: 0,
        }
    }

    pub fn status(status: u16) -> Self {
        MockResponse {
            status,
            body: format!("{{\"error\":\"mock status {status}\"}}"),
            delay_ms: 0,
        }
    }

    pub fn with_delay(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }
}

/// A request as seen by the mock server. Headers are not kept, so secrets never land here.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub path: String,
    pub body: String,
    pub bearer: bool,
    /// The script had no response left for this request.
    pub overflow: bool,
}

impl LoggedRequest {
    pub fn chat_request(&self) -> Option<ChatRequest> {
        serde_json::from_str(&self.body).ok()
    }
}

type Responder = dyn Fn(&LoggedRequest) -> MockResponse + Send + Sync;

enum Script {
    Sequential(Mutex<VecDeque<MockResponse>>),
    Dynamic(Box<Responder>),
}

struct MockState {
    script: Script,
    log: Mutex<Vec<LoggedRequest>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    stop: AtomicBool,
}

/// Handle to a running mock server; dropping it shuts the server down.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

#[derive(Debug, Error)]
#[error("mock server: {0}")]
pub struct MockError(String);

const MOCK_WORKERS: usize = 16;

impl MockServer {
    /// Serves `script` in order; requests beyond its end get HTTP 500.
    pub fn start(script: Vec<MockResponse>) -> Result<Self, MockError> {
        if script.is_empty() {
            return Err(MockError("script must not be empty".into()));
        }
        Self::launch(Script::Sequential(Mutex::new(script.into())))
    }

    /// Answers every request through `responder`.
    pub fn with_responder(responder: impl Fn(&LoggedRequest) -> MockResponse + Send + Sync + 'static) -> Result<Self, MockError> {
        Self::launch(Script::Dynamic(Box::new(responder)))
    }

    fn launch(script: Script) -> Result<Self, MockError> {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").map_err(|e| MockError(e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| MockError("server has no IP address".into()))?;
        let state = Arc::new(MockState {
            script,
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
        });
        let workers = (0..MOCK_WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let state = Arc::clone(&state);
                thread::spawn(move || serve(&server, &state))
            })
            .collect();
        Ok(MockServer {
            addr,
            state,
            server,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.state.log.lock().expect("log lock").clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().expect("log lock").len()
    }

    pub fn overflow_count(&self) -> usize {
        self.state.log.lock().expect("log lock").iter().filter(|r| r.overflow).count()
    }

    /// Highest number of requests that were being handled at the same time.
    pub fn max_concurrent_seen(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }
}

fn serve(server: &tiny_http::Server, state: &MockState) {
    while !state.stop.load(Ordering::SeqCst) {
        let mut request = match server.recv_timeout(Duration::from_millis(25)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(_) => break,
        };
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);

        let mut body = String::new();
        let _ = request.as_reader().read_to_string(&mut body);
        let bearer = request
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str().starts_with("Bearer "));
        let mut logged = LoggedRequest {
            path: request.url().to_string(),
            body,
            bearer,
            overflow: false,
        };
        let reply = match &state.script {
            Script::Sequential(queue) => queue.lock().expect("script lock").pop_front(),
            Script::Dynamic(f) => Some(f(&logged)),
        };
        let reply = reply.unwrap_or_else(|| {
            logged.overflow = true;
            log::warn!("mock script exhausted; answering 500");
            MockResponse {
                status: 500,
                body: "{\"error\":\"mock script exhausted\"}".into(),
                delay_ms: 0,
            }
        });
        state.log.lock().expect("log lock").push(logged);
        if reply.delay_ms > 0 {
            thread::sleep(Duration::from_millis(reply.delay_ms));
        }
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let response = tiny_http::Response::from_string(reply.body)
            .with_status_code(reply.status)
            .with_header(header);
        state.in_flight.fetch_sub(1, Ordering::SeqCst);
        let _ = request.respond(response);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

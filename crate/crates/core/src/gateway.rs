//! Chat-completion access for the optimizer and for VAU inference.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] with a retry policy, a per-backend
//! in-flight limit and optional JSON-lines transcripts. Two backends ship
//! with the crate: [`OpenAiBackend`] speaks the OpenAI-compatible
//! `/v1/chat/completions` protocol and [`MockBackend`] replays scripted
//! fixtures deterministically.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::prompt_hash;

pub const ENV_LLM_URL: &str = "PRISMVAU_LLM_URL";
pub const ENV_LLM_KEY: &str = "PRISMVAU_LLM_KEY";

pub const VAU_MAX_TOKENS: u32 = 512;
pub const OPTIMIZER_MAX_TOKENS: u32 = 1536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One earlier message of a multi-turn conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    /// Opaque media identifier attached to the final user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    /// Earlier turns, placed between the system and the final user message.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<ChatTurn>,
    /// 0 requests greedy decoding.
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            video_ref: None,
            history: Vec::new(),
            temperature: 0.0,
            max_tokens: VAU_MAX_TOKENS,
            tag: tag.into(),
            seed: None,
        }
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.system, &self.user)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend: String,
    pub latency_ms: u64,
}

/// Failure of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("backend throttled the request")]
    Throttled,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("response truncated at max_tokens")]
    Truncated(String),
    #[error("mock script exhausted: {0}")]
    ScriptExhausted(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Throttled)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: BackendError },
    #[error("non-retryable protocol error: {0}")]
    Protocol(String),
    #[error("response truncated at max_tokens ({} chars received)", partial.len())]
    Truncated { partial: String },
    #[error("mock script exhausted: {0}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    #[serde(default = "yes")]
    pub jitter: bool,
}

fn yes() -> bool {
    true
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 500, jitter: true }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; handy for tests and mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, jitter: false }
    }

    /// Delay before retry number `attempt` (1-based count of failed attempts).
    pub fn delay(&self, attempt: u32) -> Duration {
        let cap = self.base_delay_ms.saturating_mul(1u64 << attempt.saturating_sub(1).min(20));
        let ms = if self.jitter && cap > 0 { rand::random_range(0..=cap) } else { cap };
        Duration::from_millis(ms)
    }
}

/// Counting semaphore that also records the peak number of holders.
struct Limiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
    peak: AtomicUsize,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), current: Mutex::new(0), cv: Condvar::new(), peak: AtomicUsize::new(0) }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut cur = self.current.lock().unwrap();
        while *cur >= self.max {
            cur = self.cv.wait(cur).unwrap();
        }
        *cur += 1;
        self.peak.fetch_max(*cur, Ordering::SeqCst);
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct GatewayStats {
    pub calls: u64,
    pub attempts: u64,
    pub retries: u64,
    pub failures: u64,
    pub peak_in_flight: usize,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    tag: &'a str,
    backend: &'a str,
    request: &'a ChatRequest,
    response: Option<&'a str>,
    error: Option<String>,
    attempts: u32,
    latency_ms: u64,
}

/// Shareable handle combining a backend with policy.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: Limiter,
    transcript: Option<Mutex<BufWriter<File>>>,
    calls: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backend,
            retry,
            limiter: Limiter::new(max_in_flight),
            transcript: None,
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }

    /// Appends every request/response pair to `path` as JSON lines.
    pub fn with_transcript(mut self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.transcript = Some(Mutex::new(BufWriter::new(f)));
        Ok(self)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            calls: self.calls.load(Ordering::SeqCst),
            attempts: self.attempts.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
            peak_in_flight: self.limiter.peak.load(Ordering::SeqCst),
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user prompt is empty".into()));
        }
        if !(request.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let mut attempt = 0u32;
        let outcome = loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let result = {
                let _slot = self.limiter.acquire();
                self.backend.complete(request)
            };
            match result {
                Ok(text) => break Ok(text),
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    log::debug!("{} attempt {attempt} failed: {e}; retrying", request.tag);
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(e) if e.is_transient() => {
                    break Err(GatewayError::Exhausted { attempts: attempt, last: e });
                }
                Err(BackendError::Truncated(partial)) => break Err(GatewayError::Truncated { partial }),
                Err(BackendError::ScriptExhausted(m)) => break Err(GatewayError::ScriptExhausted(m)),
                Err(e) => break Err(GatewayError::Protocol(e.to_string())),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        if outcome.is_err() {
            self.failures.fetch_add(1, Ordering::SeqCst);
        }
        if let Some(t) = &self.transcript {
            let line = TranscriptLine {
                tag: &request.tag,
                backend: self.backend.name(),
                request,
                response: outcome.as_ref().ok().map(String::as_str),
                error: outcome.as_ref().err().map(|e| e.to_string()),
                attempts: attempt,
                latency_ms,
            };
            let mut w = t.lock().unwrap();
            if let Ok(s) = serde_json::to_string(&line) {
                let _ = writeln!(w, "{s}");
                let _ = w.flush();
            }
        }
        outcome.map(|text| ChatResponse { text, backend: self.backend.name().to_string(), latency_ms })
    }
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    Throttle,
    Truncated,
    Protocol,
}

/// A scripted reply: either text or a simulated failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Failure { error: MockFailure },
}

impl From<&str> for MockReply {
    fn from(s: &str) -> Self {
        MockReply::Text(s.to_string())
    }
}

impl MockReply {
    fn materialize(&self) -> Result<String, BackendError> {
        match self {
            MockReply::Text(t) => Ok(t.clone()),
            MockReply::Failure { error: MockFailure::Timeout } => Err(BackendError::Timeout),
            MockReply::Failure { error: MockFailure::Throttle } => Err(BackendError::Throttled),
            MockReply::Failure { error: MockFailure::Truncated } => Err(BackendError::Truncated(String::new())),
            MockReply::Failure { error: MockFailure::Protocol } => {
                Err(BackendError::Protocol("scripted protocol error".into()))
            }
        }
    }
}

/// One row of a matcher table. `video_ref` and `prompt_hash` narrow the match
/// when present. Use `reply` for a response that repeats on every hit, or
/// `replies` for a sequence consumed in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherEntry {
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<MockReply>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<MockReply>,
}

impl MatcherEntry {
    pub fn fixed(tag: &str, reply: impl Into<MockReply>) -> Self {
        Self { tag: tag.into(), video_ref: None, prompt_hash: None, reply: Some(reply.into()), replies: vec![] }
    }

    fn matches(&self, r: &ChatRequest) -> bool {
        self.tag == r.tag
            && self.video_ref.as_ref().is_none_or(|v| Some(v) == r.video_ref.as_ref())
            && self.prompt_hash.as_ref().is_none_or(|h| *h == r.prompt_hash())
    }

    fn specificity(&self) -> u8 {
        u8::from(self.video_ref.is_some()) + u8::from(self.prompt_hash.is_some())
    }
}

/// Fixture document accepted by [`register_mock_script`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockScript {
    Queue(Vec<MockReply>),
    Matchers(Vec<MatcherEntry>),
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

enum MockMode {
    Queue(VecDeque<MockReply>),
    Matchers { entries: Vec<MatcherEntry>, cursors: HashMap<usize, usize> },
    Func(Box<Responder>),
}

/// Deterministic scripted backend. All state sits behind one mutex, so
/// concurrent callers observe a single consumption order.
pub struct MockBackend {
    name: String,
    state: Mutex<MockMode>,
    captured: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    fn with_mode(mode: MockMode) -> Self {
        Self { name: "mock".into(), state: Mutex::new(mode), captured: Mutex::new(Vec::new()) }
    }

    pub fn queue<I, R>(replies: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<MockReply>,
    {
        Self::with_mode(MockMode::Queue(replies.into_iter().map(Into::into).collect()))
    }

    pub fn matchers(entries: Vec<MatcherEntry>) -> Self {
        Self::with_mode(MockMode::Matchers { entries, cursors: HashMap::new() })
    }

    pub fn from_fn(f: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self::with_mode(MockMode::Func(Box::new(f)))
    }

    /// Every request seen so far, in arrival order.
    pub fn captured(&self) -> Vec<ChatRequest> {
        self.captured.lock().unwrap().clone()
    }
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut state = self.state.lock().unwrap();
        self.captured.lock().unwrap().push(request.clone());
        match &mut *state {
            MockMode::Queue(q) => match q.pop_front() {
                Some(r) => r.materialize(),
                None => Err(BackendError::ScriptExhausted("reply queue is empty".into())),
            },
            MockMode::Matchers { entries, cursors } => {
                let hit = entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.matches(request))
                    .max_by_key(|(i, e)| (e.specificity(), std::cmp::Reverse(*i)))
                    .map(|(i, _)| i);
                let Some(i) = hit else {
                    return Err(BackendError::ScriptExhausted(format!(
                        "no matcher for tag '{}' video_ref {:?}",
                        request.tag, request.video_ref
                    )));
                };
                let entry = &entries[i];
                if let Some(r) = &entry.reply {
                    return r.materialize();
                }
                let cursor = cursors.entry(i).or_insert(0);
                match entry.replies.get(*cursor) {
                    Some(r) => {
                        *cursor += 1;
                        r.materialize()
                    }
                    None => Err(BackendError::ScriptExhausted(format!(
                        "matcher '{}' ran out of replies",
                        entry.tag
                    ))),
                }
            }
            MockMode::Func(f) => f(request),
        }
    }
}

/// Builds a mock backend from fixtures.
pub fn register_mock_script(script: MockScript) -> Result<Arc<MockBackend>, GatewayError> {
    match script {
        MockScript::Queue(q) if q.is_empty() => Err(GatewayError::InvalidRequest("empty mock queue".into())),
        MockScript::Matchers(m) if m.is_empty() => Err(GatewayError::InvalidRequest("empty matcher table".into())),
        MockScript::Matchers(m) if m.iter().any(|e| e.reply.is_none() && e.replies.is_empty()) => {
            Err(GatewayError::InvalidRequest("matcher without reply".into()))
        }
        MockScript::Queue(q) => Ok(Arc::new(MockBackend::queue(q))),
        MockScript::Matchers(m) => Ok(Arc::new(MockBackend::matchers(m))),
    }
}

pub fn load_mock_script(path: impl AsRef<Path>) -> Result<MockScript, GatewayError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| GatewayError::InvalidRequest(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// OpenAI-compatible backend

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Reads `PRISMVAU_LLM_URL` / `PRISMVAU_LLM_KEY`.
    pub fn from_env(model: impl Into<String>, timeout: Duration) -> Option<Self> {
        let url = std::env::var(ENV_LLM_URL).ok()?;
        Some(Self::new(url, std::env::var(ENV_LLM_KEY).ok(), model, timeout))
    }

    pub fn request_body(&self, r: &ChatRequest) -> serde_json::Value {
        fn user_content(text: &str, video: Option<&String>) -> serde_json::Value {
            match video {
                None => serde_json::Value::String(text.to_string()),
                Some(v) => serde_json::json!([
                    { "type": "video_url", "video_url": { "url": v } },
                    { "type": "text", "text": text },
                ]),
            }
        }
        let mut messages = Vec::new();
        if !r.system.is_empty() {
            messages.push(serde_json::json!({ "role": "system", "content": r.system }));
        }
        for t in &r.history {
            let content = match t.role {
                Role::User => user_content(&t.content, t.video_ref.as_ref()),
                Role::Assistant => serde_json::Value::String(t.content.clone()),
            };
            messages.push(serde_json::json!({ "role": t.role, "content": content }));
        }
        messages.push(serde_json::json!({ "role": "user", "content": user_content(&r.user, r.video_ref.as_ref()) }));
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": r.temperature,
            "max_tokens": r.max_tokens,
        });
        if let Some(seed) = r.seed {
            body["seed"] = seed.into();
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let mut call = self.agent.post(&url);
        if let Some(k) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = call.send_json(self.request_body(request)).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout,
            // connection-level failures are worth retrying
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => BackendError::Timeout,
            other => BackendError::Protocol(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        match status {
            200 => {}
            429 | 503 => return Err(BackendError::Throttled),
            408 | 504 => return Err(BackendError::Timeout),
            s => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(BackendError::Protocol(format!("HTTP {s}: {body}")));
            }
        }
        let parsed: CompletionResponse =
            resp.body_mut().read_json().map_err(|e| BackendError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        if choice.finish_reason.as_deref() == Some("length") {
            return Err(BackendError::Truncated(text));
        }
        Ok(text)
    }
}

/// Declarative backend selection, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmBackendSpec {
    /// Scripted fixtures loaded from a JSON file.
    Mock { script: PathBuf },
    /// OpenAI-compatible server; `url` falls back to `PRISMVAU_LLM_URL`.
    #[serde(rename = "openai")]
    OpenAi {
        #[serde(default)]
        url: Option<String>,
        model: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub backend: LlmBackendSpec,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> f64 {
    120.0
}

impl GatewayConfig {
    /// Instantiates the gateway; relative paths resolve against `root`.
    pub fn build(&self, root: &Path) -> Result<Gateway, GatewayError> {
        let backend: Arc<dyn ChatBackend> = match &self.backend {
            LlmBackendSpec::Mock { script } => register_mock_script(load_mock_script(root.join(script))?)?,
            LlmBackendSpec::OpenAi { url, model } => {
                let url = url
                    .clone()
                    .or_else(|| std::env::var(ENV_LLM_URL).ok())
                    .ok_or_else(|| GatewayError::InvalidRequest(format!("no URL configured and {ENV_LLM_URL} unset")))?;
                Arc::new(OpenAiBackend::new(
                    url,
                    std::env::var(ENV_LLM_KEY).ok(),
                    model.clone(),
                    Duration::from_secs_f64(self.timeout_s),
                ))
            }
        };
        let gw = Gateway::new(backend, self.retry, self.max_in_flight);
        match &self.transcript {
            Some(p) => gw.with_transcript(root.join(p)).map_err(|e| GatewayError::InvalidRequest(e.to_string())),
            None => Ok(gw),
        }
    }
}

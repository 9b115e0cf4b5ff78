//! Backend-agnostic model access with caching, retries and replay.
//!
//! A [`Gateway`] wraps one [`Backend`] and adds:
//!
//! * an in-memory response cache, optionally persisted to a [`FixtureStore`],
//! * coalescing of concurrent identical requests,
//! * exponential backoff on transient failures, bounded by a total delay
//!   ceiling,
//! * an optional call trace for auditing stage order.
//!
//! Backends are the chat-completions HTTP client, the fixture replay
//! backend, a recording wrapper that writes live replies into a fixture
//! store, and a closure backend for tests and simulations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::image::ImageInput;

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RequestKind {
    Text,
    Vision,
}

impl RequestKind {
    fn tag(self) -> &'static str {
        match self {
            RequestKind::Text => "text",
            RequestKind::Vision => "vision",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub kind: RequestKind,
    pub prompt: String,
    pub image: Option<ImageInput>,
    pub temperature: f64,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl ModelRequest {
    pub fn text(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            kind: RequestKind::Text,
            prompt: prompt.into(),
            image: None,
            temperature: DEFAULT_TEMPERATURE,
            model_id: model_id.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn vision(model_id: impl Into<String>, prompt: impl Into<String>, image: ImageInput) -> Self {
        Self {
            kind: RequestKind::Vision,
            image: Some(image),
            ..Self::text(model_id, prompt)
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output_tokens(mut self, tokens: u32) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    pub fn image_digest(&self) -> Option<&str> {
        self.image.as_ref().map(ImageInput::digest)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if (self.kind == RequestKind::Vision) != self.image.is_some() {
            return Err(GatewayError::InvalidRequest(
                "vision requests need an image and text requests must not carry one",
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be finite and non-negative"));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub cached: bool,
}

/// Hex SHA-256 over the length-framed request identity: model id,
/// temperature bits, kind, prompt bytes and image digest. The output token
/// budget is deliberately excluded.
pub fn cache_key(req: &ModelRequest) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(req.model_id.as_bytes());
    field(&req.temperature.to_bits().to_le_bytes());
    field(req.kind.tag().as_bytes());
    field(req.prompt.as_bytes());
    field(req.image_digest().unwrap_or("").as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("model refused: {0}")]
    Refused(String),
    #[error("no fixture for prompt-hash {0}")]
    MissingFixture(String),
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("request {key} failed after {attempts} attempt(s): {reason}")]
    Exhausted {
        key: String,
        attempts: u32,
        reason: String,
    },
    #[error("backend {0} cannot answer vision requests")]
    Unsupported(String),
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("model refused request {key}: {reason}")]
    Refused { key: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
}

/// A source of model replies. Implementations must be usable from many
/// threads at once.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn supports_vision(&self) -> bool {
        true
    }

    /// Produces the raw reply text. `key` is the request's cache key.
    fn complete(&self, req: &ModelRequest, key: &str) -> Result<String, BackendError>;
}

type ReplyFn = dyn Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend answering through a closure.
pub struct FnBackend {
    name: String,
    vision: bool,
    reply: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        reply: impl Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            vision: true,
            reply: Box::new(reply),
        }
    }

    pub fn text_only(mut self) -> Self {
        self.vision = false;
        self
    }
}

impl Backend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_vision(&self) -> bool {
        self.vision
    }

    fn complete(&self, req: &ModelRequest, _key: &str) -> Result<String, BackendError> {
        (self.reply)(req)
    }
}

/// Directory of raw replies, one `<cache-key>.txt` file per request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<String>> {
        match std::fs::read_to_string(self.path(key)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Writes through a temporary file so readers never see partial text.
    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{key}.{}.{seq}.tmp", std::process::id()));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.path(key))
    }
}

/// Serves replies from a fixture store and never touches the network.
pub struct ReplayBackend {
    store: FixtureStore,
}

impl ReplayBackend {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, _req: &ModelRequest, key: &str) -> Result<String, BackendError> {
        match self.store.get(key) {
            Ok(Some(text)) => Ok(text),
            Ok(None) => Err(BackendError::MissingFixture(key.to_owned())),
            Err(e) => Err(BackendError::Fatal(format!(
                "cannot read fixture {}: {e}",
                self.store.path(key).display()
            ))),
        }
    }
}

/// Passes requests to `inner` and stores every successful reply.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    store: FixtureStore,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>, store: FixtureStore) -> Self {
        Self { inner, store }
    }
}

impl Backend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn supports_vision(&self) -> bool {
        self.inner.supports_vision()
    }

    fn complete(&self, req: &ModelRequest, key: &str) -> Result<String, BackendError> {
        let text = self.inner.complete(req, key)?;
        self.store
            .put(key, &text)
            .map_err(|e| BackendError::Fatal(format!("cannot record fixture {key}: {e}")))?;
        Ok(text)
    }
}

const SYSTEM_PROMPT: &str = "Follow the instructions in the user message exactly.";

/// Client for the chat-completions wire format.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            api_key: api_key.into(),
        }
    }

    pub fn request_body(req: &ModelRequest) -> Value {
        let user = match &req.image {
            Some(image) => json!([
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": image.data_url()}},
            ]),
            None => Value::String(req.prompt.clone()),
        };
        json!({
            "model": req.model_id,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
        })
    }

    /// Pulls the assistant text out of a chat-completions response body.
    pub fn reply_text(body: &str) -> Result<String, BackendError> {
        let value: Value = serde_json::from_str(body)
            .map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
        let message = &value["choices"][0]["message"];
        let text = match &message["content"] {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
            _ => String::new(),
        };
        if !text.trim().is_empty() {
            return Ok(text);
        }
        match message["refusal"].as_str() {
            Some(reason) => Err(BackendError::Refused(reason.to_owned())),
            None if message.is_null() => Err(BackendError::Fatal(format!(
                "response has no choices: {}",
                truncate(body, 200)
            ))),
            None => Err(BackendError::Refused("empty reply".into())),
        }
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.endpoint
    }

    fn complete(&self, req: &ModelRequest, _key: &str) -> Result<String, BackendError> {
        let body = Self::request_body(req).to_string();
        let result = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", format!("Bearer {}", self.api_key))
            .content_type("application/json")
            .send(body.as_bytes());
        let mut response = match result {
            Ok(r) => r,
            Err(
                e @ (ureq::Error::Timeout(_)
                | ureq::Error::Io(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::HostNotFound),
            ) => return Err(BackendError::Transient(e.to_string())),
            Err(e) => return Err(BackendError::Fatal(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("reading response body: {e}")))?;
        match status {
            200..=299 => Self::reply_text(&text),
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}"))),
            429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}"))),
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Exponential backoff schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay: Duration,
    pub multiplier: f64,
    /// Upper bound on the summed sleep time for one request.
    pub max_total_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_delay: Duration::from_secs(1),
            multiplier: 2.0,
            max_total_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Sleep before retry number `failed` (1 after the first failure).
    pub fn delay_after(&self, failed: u32) -> Duration {
        let factor = self.multiplier.powi(failed.saturating_sub(1) as i32);
        self.initial_delay.mul_f64(factor.min(1e6))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// One backend call, as seen by the gateway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub key: String,
    pub kind: RequestKind,
    pub model_id: String,
    pub prompt: String,
    pub cached: bool,
    pub attempts: u32,
}

struct ResponseCache {
    memory: Mutex<HashMap<String, String>>,
    disk: Option<FixtureStore>,
}

impl ResponseCache {
    fn get(&self, key: &str) -> Option<String> {
        if let Some(text) = lock(&self.memory).get(key) {
            return Some(text.clone());
        }
        let text = self.disk.as_ref()?.get(key).ok().flatten()?;
        lock(&self.memory).insert(key.to_owned(), text.clone());
        Some(text)
    }

    fn put(&self, key: &str, text: &str) {
        lock(&self.memory).insert(key.to_owned(), text.to_owned());
        if let Some(disk) = &self.disk {
            if let Err(e) = disk.put(key, text) {
                log::warn!("cannot persist cache entry {key}: {e}");
            }
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    cache: Option<ResponseCache>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    trace: Option<Mutex<Vec<CallRecord>>>,
}

impl Gateway {
    /// Gateway with an in-memory cache and the default retry policy.
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            cache: Some(ResponseCache {
                memory: Mutex::new(HashMap::new()),
                disk: None,
            }),
            inflight: Mutex::new(HashMap::new()),
            trace: None,
        }
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// Persists cache entries in `store` and consults it on misses.
    pub fn with_disk_cache(mut self, store: FixtureStore) -> Self {
        self.cache = Some(ResponseCache {
            memory: Mutex::new(HashMap::new()),
            disk: Some(store),
        });
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Calls recorded so far, in completion order. Empty unless tracing.
    pub fn trace(&self) -> Vec<CallRecord> {
        self.trace.as_ref().map(|t| lock(t).clone()).unwrap_or_default()
    }

    pub fn call(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        self.dispatch(req, true)
    }

    /// Like [`Gateway::call`] but ignores any cached reply. The fresh reply
    /// replaces the cache entry.
    pub fn refresh(&self, req: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        self.dispatch(req, false)
    }

    fn dispatch(&self, req: &ModelRequest, read_cache: bool) -> Result<ModelResponse, GatewayError> {
        req.validate()?;
        if req.kind == RequestKind::Vision && !self.backend.supports_vision() {
            return Err(GatewayError::Unsupported(self.backend.name().to_owned()));
        }
        let key = cache_key(req);
        let started = Instant::now();
        let Some(cache) = &self.cache else {
            let (text, attempts) = self.call_backend(req, &key)?;
            return Ok(self.finish(req, key, text, false, attempts, started));
        };
        if read_cache {
            if let Some(text) = cache.get(&key) {
                return Ok(self.finish(req, key, text, true, 0, started));
            }
        }
        let slot = Arc::clone(lock(&self.inflight).entry(key.clone()).or_default());
        let result = {
            let _guard = lock(&slot);
            match cache.get(&key).filter(|_| read_cache) {
                Some(text) => Ok((text, true, 0)),
                None => self.call_backend(req, &key).map(|(text, attempts)| {
                    cache.put(&key, &text);
                    (text, false, attempts)
                }),
            }
        };
        {
            let mut inflight = lock(&self.inflight);
            if Arc::strong_count(&slot) == 2 {
                inflight.remove(&key);
            }
        }
        let (text, cached, attempts) = result?;
        Ok(self.finish(req, key, text, cached, attempts, started))
    }

    fn finish(
        &self,
        req: &ModelRequest,
        key: String,
        text: String,
        cached: bool,
        attempts: u32,
        started: Instant,
    ) -> ModelResponse {
        let latency_ms = started.elapsed().as_millis() as u64;
        log::debug!(
            "{} {} key={} cached={} attempts={} latency={}ms",
            self.backend.name(),
            req.kind.tag(),
            &key[..12],
            cached,
            attempts,
            latency_ms
        );
        if let Some(trace) = &self.trace {
            lock(trace).push(CallRecord {
                key,
                kind: req.kind,
                model_id: req.model_id.clone(),
                prompt: req.prompt.clone(),
                cached,
                attempts,
            });
        }
        ModelResponse {
            text,
            latency_ms,
            cached,
        }
    }

    fn call_backend(&self, req: &ModelRequest, key: &str) -> Result<(String, u32), GatewayError> {
        let mut waited = Duration::ZERO;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let reason = match self.backend.complete(req, key) {
                Ok(text) => return Ok((text, attempt)),
                Err(BackendError::Transient(reason)) => reason,
                Err(BackendError::Auth(reason)) => return Err(GatewayError::AuthError(reason)),
                Err(BackendError::Refused(reason)) => {
                    return Err(GatewayError::Refused {
                        key: key.to_owned(),
                        reason,
                    })
                }
                Err(e @ (BackendError::MissingFixture(_) | BackendError::Fatal(_))) => {
                    return Err(GatewayError::Exhausted {
                        key: key.to_owned(),
                        attempts: attempt,
                        reason: e.to_string(),
                    })
                }
            };
            let delay = self.retry.delay_after(attempt);
            if attempt >= self.retry.max_attempts || waited + delay > self.retry.max_total_delay {
                return Err(GatewayError::Exhausted {
                    key: key.to_owned(),
                    attempts: attempt,
                    reason,
                });
            }
            log::warn!("{}: {reason}; retrying in {delay:?}", self.backend.name());
            (self.sleeper)(delay);
            waited += delay;
        }
    }
}

/// A gateway plus the model settings one pipeline role uses.
#[derive(Clone)]
pub struct Binding {
    pub gateway: Arc<Gateway>,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Binding {
    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>) -> Self {
        Self {
            gateway,
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn request(&self, prompt: String, image: Option<&ImageInput>) -> ModelRequest {
        let req = match image {
            Some(image) => ModelRequest::vision(&self.model_id, prompt, image.clone()),
            None => ModelRequest::text(&self.model_id, prompt),
        };
        req.with_temperature(self.temperature)
            .with_max_output_tokens(self.max_output_tokens)
    }

    /// Sends `prompt`, bypassing the cache when `fresh` is set.
    pub fn ask(
        &self,
        prompt: String,
        image: Option<&ImageInput>,
        fresh: bool,
    ) -> Result<ModelResponse, GatewayError> {
        let req = self.request(prompt, image);
        if fresh {
            self.gateway.refresh(&req)
        } else {
            self.gateway.call(&req)
        }
    }

    /// Sends `prompt` and parses the reply. While parsing fails with a
    /// `retryable` error, asks again up to `retry_limit` more times with the
    /// cache bypassed. The inner error carries the last parse error and the
    /// raw reply it came from.
    pub fn ask_parsed<T, E>(
        &self,
        prompt: &str,
        image: Option<&ImageInput>,
        retry_limit: u32,
        parse: impl Fn(&str) -> Result<T, E>,
        retryable: impl Fn(&E) -> bool,
    ) -> Result<Result<T, (E, String)>, GatewayError> {
        let mut attempt = 0;
        loop {
            let reply = self.ask(prompt.to_owned(), image, attempt > 0)?;
            match parse(&reply.text) {
                Ok(v) => return Ok(Ok(v)),
                Err(e) if attempt < retry_limit && retryable(&e) => attempt += 1,
                Err(e) => return Ok(Err((e, reply.text))),
            }
        }
    }
}

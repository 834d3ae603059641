//! Chat generation and continuation scoring against OpenAI-compatible endpoints.
//!
//! [`LlmGateway`] wraps any [`Backend`] with a response cache, retry with
//! exponential backoff, and a FIFO concurrency limiter. Two backends ship:
//! [`HttpBackend`] for real endpoints and [`MockBackend`] for deterministic
//! fixture- or rule-driven responses.

mod cache;
mod http;
mod limiter;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheError, ResponseCache};
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use limiter::{FairLimiter, Permit};
pub use mock::{prompt_hash, score_hash, FixtureRecord, MockBackend, Responder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        Self { model_id: model_id.into(), messages, temperature: 0.0, max_tokens: 512, seed: None }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.messages.first() {
            None => return Err("messages must not be empty".into()),
            Some(m) if m.role == Role::Assistant => return Err("first message must be system or user".into()),
            _ => {}
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be > 0".into());
        }
        Ok(())
    }

    /// Content of the last user message.
    pub fn last_user_content(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model_id: String,
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend does not support {0}")]
    Unsupported(String),
    #[error("no mock response for {0}")]
    MissingFixture(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout | BackendError::RateLimited { .. } => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 408,
            _ => false,
        }
    }
}

/// A source of completions and continuation log-probabilities.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError>;
    /// Total log-probability of `continuation` given `context`.
    fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(20) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, ..Self::default() }
    }

    fn delay(&self, retry: u32, hint: Option<Duration>) -> Duration {
        let backoff = self.base_delay.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX));
        hint.unwrap_or(backoff).max(backoff).min(self.max_delay)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend_id} failed after {attempts} attempt(s): {source}")]
    Backend {
        backend_id: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("score {0} is not a valid log-probability")]
    InvalidScore(f64),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl GatewayError {
    pub fn attempts(&self) -> Option<u32> {
        match self {
            GatewayError::Backend { attempts, .. } => Some(*attempts),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
}

impl GatewayStats {
    pub fn cache_hit_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

/// Shared, thread-safe handle over one backend.
#[derive(Clone)]
pub struct LlmGateway {
    inner: Arc<Inner>,
}

struct Inner {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: FairLimiter,
    counters: Counters,
}

pub struct GatewayBuilder {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    concurrency: usize,
}

impl GatewayBuilder {
    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    pub fn build(self) -> LlmGateway {
        LlmGateway {
            inner: Arc::new(Inner {
                backend: self.backend,
                cache: self.cache,
                retry: self.retry,
                limiter: FairLimiter::new(self.concurrency),
                counters: Counters::default(),
            }),
        }
    }
}

fn request_key(backend_id: &str, kind: &str, payload: &impl Serialize) -> String {
    let body = serde_json::to_string(payload).expect("request payloads serialize");
    let mut hasher = Sha256::new();
    for part in [backend_id, kind, body.as_str()] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

impl LlmGateway {
    pub fn builder(backend: impl Backend + 'static) -> GatewayBuilder {
        GatewayBuilder {
            backend: Box::new(backend),
            cache: None,
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }

    pub fn backend_id(&self) -> &str {
        self.inner.backend.id()
    }

    pub fn limiter(&self) -> &FairLimiter {
        &self.inner.limiter
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.inner.counters;
        GatewayStats {
            requests: c.requests.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            backend_calls: c.backend_calls.load(Ordering::Relaxed),
        }
    }

    pub fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        req.validate().map_err(GatewayError::InvalidRequest)?;
        let backend = &self.inner.backend;
        let key = request_key(backend.id(), "generate", req);
        self.cached(&key, || backend.generate(req))
    }

    /// Sum of per-token log-probabilities of the continuation.
    pub fn score_continuation(&self, req: &ScoreRequest) -> Result<f64, GatewayError> {
        if req.continuation.is_empty() {
            return Err(GatewayError::InvalidRequest("continuation must not be empty".into()));
        }
        let backend = &self.inner.backend;
        let key = request_key(backend.id(), "score", req);
        let score: f64 = self.cached(&key, || backend.score(req))?;
        if score.is_nan() || score > 0.0 {
            return Err(GatewayError::InvalidScore(score));
        }
        Ok(score)
    }

    fn cached<T, F>(&self, key: &str, call: F) -> Result<T, GatewayError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: Fn() -> Result<T, BackendError>,
    {
        let counters = &self.inner.counters;
        counters.requests.fetch_add(1, Ordering::Relaxed);
        if let Some(cache) = &self.inner.cache {
            if let Some(hit) = cache.get(key)? {
                counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        let value = self.with_retries(call)?;
        if let Some(cache) = &self.inner.cache {
            cache.put(key, &value)?;
        }
        Ok(value)
    }

    fn with_retries<T>(&self, call: impl Fn() -> Result<T, BackendError>) -> Result<T, GatewayError> {
        let retry = &self.inner.retry;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = {
                let _permit = self.inner.limiter.acquire();
                self.inner.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
                call()
            };
            match result {
                Ok(v) => return Ok(v),
                Err(err) if err.is_retryable() && attempts <= retry.max_retries => {
                    let hint = match &err {
                        BackendError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    let delay = retry.delay(attempts - 1, hint);
                    log::debug!("attempt {attempts} failed ({err}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(source) => {
                    return Err(GatewayError::Backend {
                        backend_id: self.backend_id().to_owned(),
                        attempts,
                        source,
                    })
                }
            }
        }
    }
}

/// Context string used for answer scoring: the query followed by the documents.
pub fn scoring_context(query: &str, documents: &str) -> String {
    format!("Question: {query}\nDocuments:\n{documents}\nAnswer:")
}

/// `exp(log P(answer | q, d') - log P(answer | q, d))`.
pub fn answerability_weight(
    gateway: &LlmGateway,
    model_id: &str,
    query: &str,
    documents: &str,
    rewritten: &str,
    answer: &str,
) -> Result<f64, GatewayError> {
    let score = |docs: &str| {
        gateway.score_continuation(&ScoreRequest {
            model_id: model_id.to_owned(),
            context: scoring_context(query, docs),
            continuation: format!(" {answer}"),
        })
    };
    let original = score(documents)?;
    let bridged = score(rewritten)?;
    Ok((bridged - original).exp())
}

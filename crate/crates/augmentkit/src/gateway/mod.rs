//! Uniform access to chat-completion and token-scoring backends.
//!
//! The [`Gateway`] wraps any [`Backend`] with retries, exponential backoff and
//! a counting semaphore that bounds concurrent in-flight calls. Results are
//! always reattached to their request index, so output ordering is a function
//! of input ordering, never of completion timing.

mod http;
mod mock;

pub use http::OpenAiHttpBackend;
pub use mock::{CountingBackend, FlakyBackend, MockDefault, ScriptedMock};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// A chat completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub model: String,
}

impl CompletionRequest {
    /// (system, user) pair with standard augmentation defaults.
    pub fn from_prompt(system: &str, user: &str, model: &str, temperature: f64) -> Self {
        Self {
            messages: vec![
                Message {
                    role: Role::System,
                    content: system.to_string(),
                },
                Message {
                    role: Role::User,
                    content: user.to_string(),
                },
            ],
            temperature,
            max_tokens: 2048,
            seed: None,
            model: model.to_string(),
        }
    }

    /// At least one user message; roles alternate validly after an optional
    /// leading system message; temperature non-negative.
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("negative temperature".into()));
        }
        let mut rest = self.messages.as_slice();
        if matches!(rest.first(), Some(m) if m.role == Role::System) {
            rest = &rest[1..];
        }
        for (idx, message) in rest.iter().enumerate() {
            let expected = if idx % 2 == 0 { Role::User } else { Role::Assistant };
            if message.role != expected {
                return Err(GatewayError::InvalidRequest(format!(
                    "message {idx}: expected {} got {}",
                    expected.as_str(),
                    message.role.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Last user message, if any.
    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// Stable digest of a request's messages; the scripted mock keys on this.
pub fn prompt_digest(request: &CompletionRequest) -> String {
    let mut buf = String::new();
    for message in &request.messages {
        buf.push_str(message.role.as_str());
        buf.push('\x1f');
        buf.push_str(&message.content);
        buf.push('\x1e');
    }
    sha256_hex(buf.as_bytes())
}

/// Digest keying scripted log-probability fixtures.
pub fn scoring_digest(context: &str, continuation: &str) -> String {
    sha256_hex(format!("{context}\x1f{continuation}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub usage: Usage,
}

/// Raw failure surfaced by a backend; the gateway decides retry policy.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("permanent backend failure: {0}")]
    Permanent(String),
    #[error("backend does not support token scoring")]
    ScoringUnsupported,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transient failures exhausted after {attempts} attempts: {last}")]
    TransientExhausted { attempts: usize, last: String },
    #[error("permanent backend error: {0}")]
    PermanentBackendError(String),
    #[error("backend returned empty text")]
    ResponseEmpty,
    #[error("backend does not support token scoring")]
    ScoringUnsupported,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("continuation must be non-empty")]
    EmptyContinuation,
}

/// Chat-completion / token-scoring provider.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    fn score_logprobs(
        &self,
        _context: &str,
        _continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        Err(BackendError::ScoringUnsupported)
    }
}

/// Backend selection plus retry and concurrency knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    /// Scripted-mock fixture file: JSON map from hex prompt digest to
    /// response object.
    #[serde(default)]
    pub mock_fixtures: Option<std::path::PathBuf>,
    #[serde(default)]
    pub mock_default: MockDefault,
    #[serde(default)]
    pub mock_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpOpenaiCompatible,
    ScriptedMock,
}

fn default_api_key_env() -> String {
    "AUGMENTKIT_API_KEY".into()
}
fn default_max_in_flight() -> usize {
    4
}
fn default_max_retries() -> usize {
    3
}
fn default_backoff_base_ms() -> u64 {
    250
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::ScriptedMock,
            endpoint: None,
            api_key_env: default_api_key_env(),
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            mock_fixtures: None,
            mock_default: MockDefault::default(),
            mock_seed: 0,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.cv.wait(available).unwrap();
        }
        *available -= 1;
    }

    fn release(&self) {
        *self.available.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// Thread-safe front door to a backend: validation, semaphore, retries.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    semaphore: Semaphore,
    max_in_flight: usize,
    max_retries: usize,
    backoff_base_ms: u64,
    attempts_total: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, config: &BackendConfig) -> Self {
        let max_in_flight = config.max_in_flight.max(1);
        Self {
            backend,
            semaphore: Semaphore::new(max_in_flight),
            max_in_flight,
            max_retries: config.max_retries,
            backoff_base_ms: config.backoff_base_ms,
            attempts_total: AtomicUsize::new(0),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Total backend attempts issued, retries included.
    pub fn attempts_total(&self) -> usize {
        self.attempts_total.load(Ordering::Relaxed)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let result = self.with_retries(|| self.backend.complete(request))?;
        if result.text.trim().is_empty() {
            return Err(GatewayError::ResponseEmpty);
        }
        if let Some(logprobs) = &result.token_logprobs {
            if logprobs.iter().any(|t| !t.logprob.is_finite() || t.logprob > 0.0) {
                return Err(GatewayError::PermanentBackendError(
                    "backend returned non-finite or positive logprobs".into(),
                ));
            }
        }
        Ok(result)
    }

    /// Per-token log-probabilities of `continuation` given `context`.
    pub fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, GatewayError> {
        if continuation.is_empty() {
            return Err(GatewayError::EmptyContinuation);
        }
        self.with_retries(|| self.backend.score_logprobs(context, continuation))
    }

    fn with_retries<R>(
        &self,
        call: impl Fn() -> Result<R, BackendError>,
    ) -> Result<R, GatewayError> {
        self.semaphore.acquire();
        let result = self.retry_loop(call);
        self.semaphore.release();
        result
    }

    fn retry_loop<R>(&self, call: impl Fn() -> Result<R, BackendError>) -> Result<R, GatewayError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            self.attempts_total.fetch_add(1, Ordering::Relaxed);
            match call() {
                Ok(result) => return Ok(result),
                Err(BackendError::Permanent(message)) => {
                    return Err(GatewayError::PermanentBackendError(message))
                }
                Err(BackendError::ScoringUnsupported) => return Err(GatewayError::ScoringUnsupported),
                Err(BackendError::Transient(message)) => {
                    last = message;
                    if attempt < self.max_retries && self.backoff_base_ms > 0 {
                        let delay = self.backoff_base_ms.saturating_mul(1 << attempt.min(10));
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
        Err(GatewayError::TransientExhausted {
            attempts: self.max_retries + 1,
            last,
        })
    }
}

/// Apply `f` to every item with at most `workers` worker threads.
///
/// Results are written back by index: the output order is exactly the input
/// order regardless of which worker finished first.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.max(1).min(items.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = f(index, &items[index]);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

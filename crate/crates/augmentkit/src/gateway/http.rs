//! OpenAI-compatible HTTP backend (blocking).
//!
//! Chat completions go through `{endpoint}/chat/completions`. Token scoring
//! uses the legacy `{endpoint}/completions` echo+logprobs call; servers that
//! do not implement it surface [`BackendError::ScoringUnsupported`].

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, BackendError, CompletionRequest, CompletionResult, TokenLogprob, Usage};

pub struct OpenAiHttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiHttpBackend {
    pub fn new(endpoint: &str, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client builds"),
        }
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let mut request = self.client.post(format!("{}{path}", self.endpoint)).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Permanent(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Permanent(format!("http status {status}")));
        }
        response
            .json()
            .map_err(|e| BackendError::Permanent(format!("invalid response body: {e}")))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

#[derive(Deserialize)]
struct LegacyResponse {
    choices: Vec<LegacyChoice>,
}

#[derive(Deserialize)]
struct LegacyChoice {
    logprobs: Option<LegacyLogprobs>,
}

#[derive(Deserialize)]
struct LegacyLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Backend for OpenAiHttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let value = self.post("/chat/completions", body)?;
        let parsed: ChatResponse = serde_json::from_value(value)
            .map_err(|e| BackendError::Permanent(format!("malformed chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Permanent("no choices in response".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(CompletionResult {
            text: choice.message.content,
            token_logprobs: None,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            },
        })
    }

    fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        let prompt = format!("{context}{continuation}");
        let body = json!({
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let value = self.post("/completions", body)?;
        let parsed: LegacyResponse =
            serde_json::from_value(value).map_err(|_| BackendError::ScoringUnsupported)?;
        let logprobs = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or(BackendError::ScoringUnsupported)?;
        // Keep only tokens that start inside the continuation span.
        let start = context.len();
        let mut scored = Vec::new();
        for ((token, logprob), offset) in logprobs
            .tokens
            .iter()
            .zip(logprobs.token_logprobs.iter())
            .zip(logprobs.text_offset.iter())
        {
            if *offset >= start {
                if let Some(lp) = logprob {
                    scored.push(TokenLogprob::new(token.clone(), *lp));
                }
            }
        }
        if scored.is_empty() {
            return Err(BackendError::ScoringUnsupported);
        }
        Ok(scored)
    }
}

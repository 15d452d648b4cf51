//! Deterministic scripted mock backend plus test wrappers.
//!
//! The mock is keyed on the prompt digest. Digests absent from the script fall
//! back to a default policy:
//!
//! * [`MockDefault::EchoLastUser`] — echo the last user message verbatim.
//! * [`MockDefault::StructuredSynth`] — inspect the prompt shape and return a
//!   structurally valid reply (a fresh instruction for expansion prompts, a
//!   score block for judge prompts, an `### Instruction:` continuation for
//!   pair-expansion prompts, ...). This is the "fully permissive" mode used by
//!   offline pipeline runs.
//!
//! Identical inputs and seed always yield identical outputs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

use super::{
    prompt_digest, scoring_digest, Backend, BackendError, CompletionRequest, CompletionResult,
    TokenLogprob, Usage,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockDefault {
    /// Echo the last user message for unscripted digests.
    #[default]
    EchoLastUser,
    /// Synthesize a structurally valid reply from the prompt shape.
    StructuredSynth,
}

/// On-disk fixture format: hex prompt digest -> response object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixture {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Default)]
pub struct ScriptedMock {
    script: HashMap<String, MockFixture>,
    logprob_script: HashMap<String, Vec<f64>>,
    default: MockDefault,
    seed: u64,
}

impl ScriptedMock {
    pub fn new(
        script: HashMap<String, MockFixture>,
        logprob_script: HashMap<String, Vec<f64>>,
        seed: u64,
    ) -> Self {
        Self {
            script,
            logprob_script,
            default: MockDefault::EchoLastUser,
            seed,
        }
    }

    pub fn with_default(mut self, default: MockDefault) -> Self {
        self.default = default;
        self
    }

    /// Load fixtures from a JSON map file.
    pub fn from_fixture_file(path: &std::path::Path, default: MockDefault, seed: u64) -> std::io::Result<Self> {
        let script: HashMap<String, MockFixture> =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self {
            script,
            logprob_script: HashMap::new(),
            default,
            seed,
        })
    }

    pub fn script_response(&mut self, digest: impl Into<String>, text: impl Into<String>) {
        self.script.insert(
            digest.into(),
            MockFixture {
                text: text.into(),
                token_logprobs: None,
            },
        );
    }

    pub fn script_logprobs(&mut self, context: &str, continuation: &str, logprobs: Vec<f64>) {
        self.logprob_script
            .insert(scoring_digest(context, continuation), logprobs);
    }

    fn synth(&self, request: &CompletionRequest, digest: &str) -> String {
        let user = request.last_user().unwrap_or_default();
        let salt = sha256_hex(
            format!("{digest}\x1f{}\x1f{}", self.seed, request.seed.unwrap_or(0)).as_bytes(),
        );
        let tag = &salt[..8];
        let user_trimmed = user.trim_end();
        if user_trimmed.ends_with("#Created Instruction#:") {
            format!("Write a synthesized task {tag} covering a different topic of the same kind.")
        } else if user_trimmed.ends_with("##Refined Prompt##:") {
            // Refinement outputs must retain the source text's ${...}
            // variables, so carry the whole source through.
            let source = user
                .rsplit("##User's Prompt##:")
                .next()
                .unwrap_or(user)
                .trim()
                .trim_end_matches("##Refined Prompt##:")
                .trim();
            format!("Refined ({tag}): {source}\nPlease answer precisely and in a structured way.")
        } else if user.contains("Score of the Assistant 2:") {
            format!(
                "Evaluation evidence: synthesized evaluation {tag}.\nScore of the Assistant 1: 8\nScore of the Assistant 2: 7"
            )
        } else if user.contains("Score of the Assistant 1:") {
            format!("Evaluation evidence: synthesized evaluation {tag}.\nScore of the Assistant 1: 8")
        } else if user_trimmed.ends_with("Task type:") {
            // Answer with the first label of the taxonomy listed in the prompt.
            user.split("task types: ")
                .nth(1)
                .and_then(|rest| rest.split('.').next())
                .and_then(|list| list.split(", ").next())
                .unwrap_or("open_qa")
                .to_string()
        } else if user_trimmed.ends_with("### Instruction:") {
            format!(
                "### Instruction:\nSynthesized instruction {tag}\n### Response:\nSynthesized response {tag}"
            )
        } else if user_trimmed.ends_with("### Response:") {
            format!("Synthesized response {tag} with enough detail to be useful.")
        } else {
            user.to_string()
        }
    }

    fn default_logprobs(&self, context: &str, continuation: &str) -> Vec<TokenLogprob> {
        // Pseudo-logprobs derived from the scoring digest: stable across runs,
        // distinct between conditioned and unconditioned contexts.
        let digest = sha256_hex(
            format!("{}\x1f{}\x1f{}", self.seed, context, continuation).as_bytes(),
        );
        let bytes = digest.as_bytes();
        continuation
            .split_whitespace()
            .enumerate()
            .map(|(idx, token)| {
                let byte = bytes[idx % bytes.len()] as f64;
                TokenLogprob::new(token, -(0.5 + byte / 64.0))
            })
            .collect()
    }
}

impl Backend for ScriptedMock {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let digest = prompt_digest(request);
        let (text, token_logprobs) = match self.script.get(&digest) {
            Some(fixture) => (fixture.text.clone(), fixture.token_logprobs.clone()),
            None => {
                let text = match self.default {
                    MockDefault::EchoLastUser => {
                        request.last_user().unwrap_or_default().to_string()
                    }
                    MockDefault::StructuredSynth => self.synth(request, &digest),
                };
                (text, None)
            }
        };
        let prompt_tokens: usize = request
            .messages
            .iter()
            .map(|m| m.content.split_whitespace().count())
            .sum();
        Ok(CompletionResult {
            usage: Usage {
                prompt_tokens: prompt_tokens as u32,
                completion_tokens: text.split_whitespace().count() as u32,
            },
            token_logprobs,
            text,
        })
    }

    fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        let digest = scoring_digest(context, continuation);
        if let Some(values) = self.logprob_script.get(&digest) {
            let tokens: Vec<&str> = continuation.split_whitespace().collect();
            return Ok(values
                .iter()
                .enumerate()
                .map(|(idx, &lp)| TokenLogprob::new(tokens.get(idx).copied().unwrap_or(""), lp))
                .collect());
        }
        Ok(self.default_logprobs(context, continuation))
    }
}

/// Wrapper that counts calls and tracks the maximum observed concurrency.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight_seen: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight_seen: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight_seen(&self) -> usize {
        self.max_in_flight_seen.load(Ordering::SeqCst)
    }

    fn enter(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight_seen.fetch_max(current, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.enter();
        let result = self.inner.complete(request);
        self.exit();
        result
    }

    fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        self.enter();
        let result = self.inner.score_logprobs(context, continuation);
        self.exit();
        result
    }
}

impl<B: Backend> Backend for Arc<CountingBackend<B>> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.as_ref().complete(request)
    }

    fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        self.as_ref().score_logprobs(context, continuation)
    }
}

/// Wrapper injecting deterministic transient failures at a given rate.
///
/// The k-th call fails iff a hash of (seed, k) falls below the rate, so a
/// retried request eventually lands on a passing call index.
pub struct FlakyBackend<B> {
    inner: B,
    rate: f64,
    seed: u64,
    counter: AtomicUsize,
}

impl<B> FlakyBackend<B> {
    pub fn new(inner: B, rate: f64, seed: u64) -> Self {
        Self {
            inner,
            rate,
            seed,
            counter: AtomicUsize::new(0),
        }
    }

    fn should_fail(&self) -> bool {
        let call = self.counter.fetch_add(1, Ordering::SeqCst);
        let digest = sha256_hex(format!("{}\x1f{call}", self.seed).as_bytes());
        let bucket = u32::from_str_radix(&digest[..8], 16).unwrap() as f64 / u32::MAX as f64;
        bucket < self.rate
    }
}

impl<B: Backend> Backend for FlakyBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        if self.should_fail() {
            return Err(BackendError::Transient("injected transient failure".into()));
        }
        self.inner.complete(request)
    }

    fn score_logprobs(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        if self.should_fail() {
            return Err(BackendError::Transient("injected transient failure".into()));
        }
        self.inner.score_logprobs(context, continuation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str) -> CompletionRequest {
        CompletionRequest::from_prompt("sys", user, "mock", 0.0)
    }

    #[test]
    fn scripted_digest_is_deterministic() {
        let mut mock = ScriptedMock::default();
        let req = request("hello");
        mock.script_response(prompt_digest(&req), "fixture text");
        let a = mock.complete(&req).unwrap().text;
        let b = mock.complete(&req).unwrap().text;
        assert_eq!(a, "fixture text");
        assert_eq!(a, b);
    }

    #[test]
    fn unscripted_digest_echoes_last_user_message() {
        let mock = ScriptedMock::default();
        let result = mock.complete(&request("echo me")).unwrap();
        assert_eq!(result.text, "echo me");
    }

    #[test]
    fn scripted_logprobs_pass_through() {
        let mut mock = ScriptedMock::default();
        mock.script_logprobs("", "a b", vec![-1.0, -2.0]);
        let scored = mock.score_logprobs("", "a b").unwrap();
        let values: Vec<f64> = scored.iter().map(|t| t.logprob).collect();
        assert_eq!(values, vec![-1.0, -2.0]);
    }

    #[test]
    fn scripted_logprobs_sum() {
        let mut mock = ScriptedMock::default();
        mock.script_logprobs("Q:", "a b", vec![-0.4, -0.5]);
        let sum: f64 = mock
            .score_logprobs("Q:", "a b")
            .unwrap()
            .iter()
            .map(|t| t.logprob)
            .sum();
        assert!((sum - (-0.9)).abs() < 1e-12);
    }

    #[test]
    fn default_logprobs_are_stable_and_negative() {
        let mock = ScriptedMock::default();
        let a = mock.score_logprobs("ctx", "one two three").unwrap();
        let b = mock.score_logprobs("ctx", "one two three").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|t| t.logprob < 0.0));
        let unconditioned = mock.score_logprobs("", "one two three").unwrap();
        assert_ne!(a, unconditioned);
    }

    #[test]
    fn flaky_backend_is_deterministic() {
        let a = FlakyBackend::new(ScriptedMock::default(), 0.5, 42);
        let b = FlakyBackend::new(ScriptedMock::default(), 0.5, 42);
        let pattern_a: Vec<bool> = (0..64).map(|_| a.should_fail()).collect();
        let pattern_b: Vec<bool> = (0..64).map(|_| b.should_fail()).collect();
        assert_eq!(pattern_a, pattern_b);
        assert!(pattern_a.iter().any(|&f| f));
        assert!(pattern_a.iter().any(|&f| !f));
    }
}

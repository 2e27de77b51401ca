//! Model access behind a uniform chat-completion interface.
//!
//! Two providers are built in: `openai_compatible`, which speaks the
//! chat-completions wire protocol against any conforming server (including
//! self-hosted deployments), and `mock`, a deterministic offline provider
//! for tests and dry runs. Both produce the same payload shape, so the
//! rest of the pipeline treats responses uniformly.

use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiCompatible,
    Mock,
}

/// Failure classes that can be marked retryable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Timeout,
    RateLimited,
    ServerError,
}

/// Retry schedule for transient provider failures.
///
/// After a failed attempt `a` (1-based) the caller sleeps
/// `base_delay * backoff_factor^(a-1)` seconds before the next attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Seconds before the first retry.
    #[serde(default = "default_base_delay")]
    pub base_delay: f64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: f64,
    #[serde(default = "default_retryable")]
    pub retryable: Vec<FailureClass>,
}

fn default_max_attempts() -> u32 {
    3
}

fn default_base_delay() -> f64 {
    2.0
}

fn default_backoff_factor() -> f64 {
    2.0
}

fn default_retryable() -> Vec<FailureClass> {
    vec![
        FailureClass::Timeout,
        FailureClass::RateLimited,
        FailureClass::ServerError,
    ]
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: default_max_attempts(),
            base_delay: default_base_delay(),
            backoff_factor: default_backoff_factor(),
            retryable: default_retryable(),
        }
    }
}

impl RetryPolicy {
    /// Sleep duration after `failed_attempt` (1-based) fails.
    pub fn delay_after(&self, failed_attempt: u32) -> Duration {
        let exponent = failed_attempt.saturating_sub(1) as i32;
        let seconds = self.base_delay * self.backoff_factor.powi(exponent);
        Duration::from_secs_f64(seconds.max(0.0))
    }

    pub fn is_retryable(&self, class: FailureClass) -> bool {
        self.retryable.contains(&class)
    }
}

/// Deterministic behavior of the mock provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Complete with the content of the last prompt message.
    Echo,
    /// Always complete with the same answer.
    Fixed { answer: String },
    /// Scan the prompt for trigger substrings, first match (in declared
    /// order) wins; `fallback` answers when nothing matches.
    Keyword {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback: Option<String>,
        triggers: IndexMap<String, String>,
    },
}

/// How to reach a model and which generation parameters to send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub model_name: String,
    /// Sampling temperature; zero by default so runs are as deterministic
    /// as the serving stack allows.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Environment variable holding the API key. When unset, the standard
    /// variables are tried; keyless local endpoints are fine too.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockBehavior>,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout() -> f64 {
    30.0
}

impl ProviderConfig {
    pub fn mock_with(behavior: MockBehavior) -> Self {
        Self {
            kind: ProviderKind::Mock,
            model_name: "mock".to_string(),
            temperature: 0.0,
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            timeout: default_timeout(),
            base_url: None,
            api_key_env: None,
            retry: RetryPolicy::default(),
            mock: Some(behavior),
        }
    }

    pub fn effective_model_name(&self) -> &str {
        if self.model_name.is_empty() && self.kind == ProviderKind::Mock {
            "mock"
        } else {
            &self.model_name
        }
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// The retryable class this failure belongs to, if any. Auth,
    /// malformed-response, and configuration failures are never retried.
    pub fn failure_class(&self) -> Option<FailureClass> {
        match self {
            ProviderError::Timeout(_) => Some(FailureClass::Timeout),
            ProviderError::RateLimited(_) => Some(FailureClass::RateLimited),
            ProviderError::Server(_) => Some(FailureClass::ServerError),
            _ => None,
        }
    }

    /// Stable snake_case name used in failure reports.
    pub fn class_name(&self) -> &'static str {
        match self {
            ProviderError::Auth(_) => "auth",
            ProviderError::Timeout(_) => "timeout",
            ProviderError::RateLimited(_) => "rate_limited",
            ProviderError::Server(_) => "server_error",
            ProviderError::MalformedResponse(_) => "malformed_response",
            ProviderError::Config(_) => "config",
        }
    }
}

#[derive(Debug, Error)]
pub enum InvokeError {
    #[error("retries exhausted after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: ProviderError },
    #[error(transparent)]
    Fatal(#[from] ProviderError),
}

impl InvokeError {
    pub fn class_name(&self) -> &'static str {
        match self {
            InvokeError::ExhaustedRetries { .. } => "exhausted_retries",
            InvokeError::Fatal(e) => e.class_name(),
        }
    }
}

/// A raw model response: the provider's payload plus call bookkeeping.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub payload: serde_json::Value,
    pub attempts_used: u32,
    pub latency: Duration,
}

#[derive(Serialize)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    // Temperature is always sent, zero included, so the server never
    // substitutes its own default.
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

/// A ready-to-call model endpoint with resolved credentials.
pub struct Provider {
    config: ProviderConfig,
    http: Option<reqwest::blocking::Client>,
    endpoint: Option<String>,
    api_key: Option<String>,
}

// Hand-written so the resolved API key can never leak through debug
// formatting into logs or error output.
impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider")
            .field("kind", &self.config.kind)
            .field("model_name", &self.config.effective_model_name())
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl Provider {
    /// Resolve configuration (base URL, credentials) and build the client.
    ///
    /// For `openai_compatible`, the base URL comes from the config or the
    /// `OPENAI_API_BASE` / `FASTCHAT_API_BASE` environment variables, and
    /// the API key from `api_key_env` (when named, it must be set) or the
    /// `OPENAI_API_KEY` / `FASTCHAT_API_KEY` variables. A missing key is
    /// allowed: local deployments are often unauthenticated.
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        match config.kind {
            ProviderKind::Mock => Ok(Self {
                config,
                http: None,
                endpoint: None,
                api_key: None,
            }),
            ProviderKind::OpenaiCompatible => {
                if config.effective_model_name().is_empty() {
                    return Err(ProviderError::Config(
                        "model_name is required for openai_compatible providers".to_string(),
                    ));
                }
                let base_url = config
                    .base_url
                    .clone()
                    .or_else(|| env_nonempty("OPENAI_API_BASE"))
                    .or_else(|| env_nonempty("FASTCHAT_API_BASE"))
                    .ok_or_else(|| {
                        ProviderError::Config(
                            "no base URL: set provider.base_url or OPENAI_API_BASE/FASTCHAT_API_BASE"
                                .to_string(),
                        )
                    })?;
                let api_key = match &config.api_key_env {
                    Some(var) => Some(env_nonempty(var).ok_or_else(|| {
                        ProviderError::Config(format!(
                            "api_key_env names {var}, but that variable is not set"
                        ))
                    })?),
                    None => {
                        env_nonempty("OPENAI_API_KEY").or_else(|| env_nonempty("FASTCHAT_API_KEY"))
                    }
                };
                let http = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(config.timeout.max(0.001)))
                    .build()
                    .map_err(|e| ProviderError::Config(e.to_string()))?;
                let endpoint = format!("{}/chat/completions", base_url.trim_end_matches('/'));
                Ok(Self {
                    config,
                    http: Some(http),
                    endpoint: Some(endpoint),
                    api_key,
                })
            }
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Issue a single model call, no retries.
    pub fn send_prompt(&self, messages: &[ChatMessage]) -> Result<RawResponse, ProviderError> {
        let start = std::time::Instant::now();
        let payload = match self.config.kind {
            ProviderKind::Mock => self.mock_payload(messages),
            ProviderKind::OpenaiCompatible => self.http_payload(messages)?,
        };
        Ok(RawResponse {
            payload,
            attempts_used: 1,
            latency: start.elapsed(),
        })
    }

    /// Call the model, retrying transient failures per the retry policy.
    ///
    /// `attempts_used` on the returned response counts every attempt made,
    /// so it always matches the number of requests the server saw.
    pub fn invoke_with_retry(&self, messages: &[ChatMessage]) -> Result<RawResponse, InvokeError> {
        let start = std::time::Instant::now();
        let policy = &self.config.retry;
        let mut attempt = 1u32;
        loop {
            match self.send_prompt(messages) {
                Ok(mut response) => {
                    response.attempts_used = attempt;
                    response.latency = start.elapsed();
                    return Ok(response);
                }
                Err(error) => {
                    let retryable = error
                        .failure_class()
                        .is_some_and(|class| policy.is_retryable(class));
                    if !retryable {
                        return Err(InvokeError::Fatal(error));
                    }
                    if attempt >= policy.max_attempts.max(1) {
                        return Err(InvokeError::ExhaustedRetries {
                            attempts: attempt,
                            last: error,
                        });
                    }
                    log::debug!(
                        "attempt {attempt} failed ({}), retrying",
                        error.class_name()
                    );
                    std::thread::sleep(policy.delay_after(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn http_payload(&self, messages: &[ChatMessage]) -> Result<serde_json::Value, ProviderError> {
        let http = self.http.as_ref().expect("http client for openai provider");
        let endpoint = self
            .endpoint
            .as_ref()
            .expect("endpoint for openai provider");
        let body = ChatCompletionRequest {
            model: self.config.effective_model_name(),
            messages,
            temperature: self.config.temperature,
            top_p: self.config.top_p,
            max_tokens: self.config.max_tokens,
        };

        let mut request = http.post(endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }

        let response = request.send().map_err(classify_transport_error)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let text = response.text().unwrap_or_default();
            let summary = truncate(&text, 200);
            return Err(match status {
                401 | 403 => ProviderError::Auth(format!("HTTP {status}: {summary}")),
                429 => ProviderError::RateLimited(format!("HTTP {status}: {summary}")),
                500..=599 => ProviderError::Server(format!("HTTP {status}: {summary}")),
                _ => ProviderError::MalformedResponse(format!("HTTP {status}: {summary}")),
            });
        }

        response
            .json::<serde_json::Value>()
            .map_err(|e| ProviderError::MalformedResponse(format!("invalid JSON body: {e}")))
    }

    fn mock_payload(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let behavior = self.config.mock.as_ref().unwrap_or(&MockBehavior::Echo);
        let content = match behavior {
            MockBehavior::Echo => messages
                .last()
                .map(|m| m.content.clone())
                .unwrap_or_default(),
            MockBehavior::Fixed { answer } => answer.clone(),
            MockBehavior::Keyword { triggers, fallback } => {
                let haystack: String = messages
                    .iter()
                    .map(|m| m.content.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
                triggers
                    .iter()
                    .find(|(trigger, _)| haystack.contains(trigger.as_str()))
                    .map(|(_, answer)| answer.clone())
                    .or_else(|| fallback.clone())
                    .unwrap_or_default()
            }
        };
        serde_json::json!({
            "id": "mock-completion",
            "object": "chat.completion",
            "model": self.config.effective_model_name(),
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop",
            }],
        })
    }
}

fn env_nonempty(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}

fn classify_transport_error(error: reqwest::Error) -> ProviderError {
    if error.is_timeout() {
        ProviderError::Timeout(error.to_string())
    } else {
        // Connection resets, refused connections, and mid-body failures
        // all look like an unhealthy server.
        ProviderError::Server(error.to_string())
    }
}

fn truncate(text: &str, max: usize) -> String {
    if text.len() <= max {
        text.to_string()
    } else {
        let mut cut = max;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}...", &text[..cut])
    }
}

/// Extract the completion text from a chat-completion payload: the first
/// choice's message content. Pure, so it can be re-applied to cached
/// payloads at any time.
pub fn summarize_response(payload: &serde_json::Value) -> Result<String, ProviderError> {
    let choices = payload
        .get("choices")
        .and_then(|c| c.as_array())
        .ok_or_else(|| {
            ProviderError::MalformedResponse("payload has no choices array".to_string())
        })?;
    let first = choices.first().ok_or_else(|| {
        ProviderError::MalformedResponse("payload contains zero choices".to_string())
    })?;
    first
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| {
            ProviderError::MalformedResponse("first choice has no message content".to_string())
        })
}

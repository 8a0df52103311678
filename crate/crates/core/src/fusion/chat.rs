//! Blocking client for OpenAI-compatible `/v1/chat/completions` endpoints.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const API_KEY_ENV: &str = "HKFR_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Request body. Serializes to exactly `{model, messages, temperature}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Pipeline requests always run at temperature 0.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("backend rejected request with HTTP {status}: {body_excerpt}")]
    Rejected { status: u16, body_excerpt: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("credential missing: set {API_KEY_ENV}")]
    MissingCredential,
}

/// Exponential backoff with full jitter: before retry `n` (0-based) sleep a
/// uniform duration in `[0, base · factor^n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn ceiling(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }

    fn delay(&self, retry: u32) -> Duration {
        let ceiling = self.ceiling(retry);
        ceiling.mul_f64(rand::thread_rng().gen::<f64>())
    }
}

const BODY_EXCERPT: usize = 200;

#[derive(Debug, Clone)]
pub struct ChatClient {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(BackendError),
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            retry: RetryPolicy::default(),
            agent,
        }
    }

    /// Client whose bearer credential comes from `HKFR_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| BackendError::MissingCredential)?;
        Ok(Self::new(endpoint).with_api_key(key))
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.endpoint.trim_end_matches('/')
        )
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = serde_json::to_string(request).expect("request serializes");
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if retries >= self.retry.max_retries {
                        return Err(BackendError::Unavailable {
                            attempts: retries + 1,
                            last: reason,
                        });
                    }
                    log::warn!("chat attempt {} failed ({reason}); retrying", retries + 1);
                    std::thread::sleep(self.retry.delay(retries));
                    retries += 1;
                }
            }
        }
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) if status == 200 => {
                return Attempt::Fatal(BackendError::Protocol(e.to_string()))
            }
            Err(_) => String::new(),
        };
        match status {
            200 => match parse_completion(&text) {
                Ok(r) => Attempt::Done(r),
                Err(e) => Attempt::Fatal(e),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(BackendError::Rejected {
                status,
                body_excerpt: text.chars().take(BODY_EXCERPT).collect(),
            }),
        }
    }
}

/// Sends `request` to `endpoint` with the credential from `HKFR_API_KEY`.
pub fn chat(endpoint: &str, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
    ChatClient::from_env(endpoint)?.chat(request)
}

/// First choice of an OpenAI-style completion body.
pub fn parse_completion(body: &str) -> Result<ChatResponse, BackendError> {
    #[derive(Deserialize)]
    struct Body {
        choices: Vec<Choice>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
        #[serde(default)]
        finish_reason: Option<String>,
    }
    #[derive(Deserialize)]
    struct Message {
        content: Option<String>,
    }
    let parsed: Body =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("no choices in response".into()))?;
    let content = choice
        .message
        .content
        .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))?;
    Ok(ChatResponse {
        content,
        finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".into()),
    })
}

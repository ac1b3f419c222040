use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::ChatRequest;

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";
pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient backend failure (status {status:?}): {message}")]
    Transient {
        status: Option<u16>,
        message: String,
    },
    #[error("authentication failed (status {status:?}): {message}")]
    Auth {
        status: Option<u16>,
        message: String,
    },
    /// Any other definitive refusal, e.g. a 400 for a malformed request.
    #[error("request rejected (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient { .. })
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            BackendError::Transient { status, .. } | BackendError::Auth { status, .. } => *status,
            BackendError::Rejected { status, .. } => Some(*status),
            BackendError::BadResponse(_) => None,
        }
    }

    pub(crate) fn from_status(status: u16, body: String) -> Self {
        match status {
            401 | 403 => BackendError::Auth {
                status: Some(status),
                message: body,
            },
            408 | 429 | 500..=599 => BackendError::Transient {
                status: Some(status),
                message: body,
            },
            _ => BackendError::Rejected {
                status,
                message: body,
            },
        }
    }

    pub(crate) fn from_reqwest(err: reqwest::Error) -> Self {
        BackendError::Transient {
            status: err.status().map(|s| s.as_u16()),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("max_retries {0} exceeds the limit of {MAX_RETRIES_LIMIT}")]
    TooManyRetries(u32),
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("{0}")]
    Invalid(String),
}

/// Connection and retry settings for a remote chat or embeddings endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub api_key_env_name: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(with = "secs")]
    pub backoff_base: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            api_key_env_name: DEFAULT_API_KEY_ENV.to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(ConfigError::TooManyRetries(self.max_retries));
        }
        if self.timeout.is_zero() {
            return Err(ConfigError::ZeroTimeout);
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: self.backoff_base,
        }
    }

    pub(crate) fn api_key(&self) -> Result<String, ConfigError> {
        std::env::var(&self.api_key_env_name)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ConfigError::MissingApiKey(self.api_key_env_name.clone()))
    }

    pub(crate) fn http_client(&self) -> Result<reqwest::blocking::Client, ConfigError> {
        reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base * 2^(retry-1).
    pub fn delay(&self, retry: u32) -> Duration {
        self.backoff_base
            .saturating_mul(1u32 << retry.saturating_sub(1).min(16))
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or has been
/// tried `max_retries + 1` times. Returns the result and the attempt count.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> (Result<T, BackendError>, u32) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match op() {
            Ok(v) => return (Ok(v), attempts),
            Err(e) if e.is_retryable() && attempts <= policy.max_retries => {
                let delay = policy.delay(attempts);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            Err(e) => return (Err(e), attempts),
        }
    }
}

/// Anything that accepts a system/user message pair and returns text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Client for endpoints that speak the common chat-completions shape.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    api_key: String,
}

impl HttpChatBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(HttpChatBackend {
            client: config.http_client()?,
            endpoint_url: config.endpoint_url.clone(),
            api_key: config.api_key()?,
        })
    }
}

pub fn chat_request_body(request: &ChatRequest) -> Value {
    json!({
        "model": request.model_id,
        "temperature": request.temperature,
        "messages": [
            {"role": "system", "content": request.system_message},
            {"role": "user", "content": request.user_message},
        ],
    })
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(&chat_request_body(request))
            .send()
            .map_err(BackendError::from_reqwest)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(BackendError::from_reqwest)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, truncate(&body, 512)));
        }
        let parsed: Value =
            serde_json::from_str(&body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))
    }
}

pub(crate) fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => format!("{}...", &s[..idx]),
        None => s.to_string(),
    }
}

/// One scripted backend outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockStep {
    Reply(String),
    Transient,
    Auth,
}

/// Deterministic stand-in for a chat endpoint.
///
/// Replies are keyed by the user message (the note text). Each key holds a
/// script of steps consumed in order; the last step repeats once the script
/// runs out. Unknown messages get the fallback reply, or a rejection.
#[derive(Debug, Default)]
pub struct MockBackend {
    scripts: Mutex<HashMap<String, (Vec<MockStep>, usize)>>,
    fallback: Option<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Always answers `reply`, whatever the request.
    pub fn constant(reply: impl Into<String>) -> Self {
        MockBackend {
            fallback: Some(reply.into()),
            ..Self::default()
        }
    }

    pub fn with_script(self, user_message: impl Into<String>, steps: Vec<MockStep>) -> Self {
        assert!(!steps.is_empty(), "mock script needs at least one step");
        self.scripts
            .lock()
            .expect("mock lock")
            .insert(user_message.into(), (steps, 0));
        self
    }

    pub fn with_reply(self, user_message: impl Into<String>, reply: impl Into<String>) -> Self {
        self.with_script(user_message, vec![MockStep::Reply(reply.into())])
    }

    /// Reply used for messages without a script.
    pub fn with_fallback(mut self, reply: impl Into<String>) -> Self {
        self.fallback = Some(reply.into());
        self
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let step = {
            let mut scripts = self.scripts.lock().expect("mock lock");
            match scripts.get_mut(&request.user_message) {
                Some((steps, cursor)) => {
                    let step = steps[(*cursor).min(steps.len() - 1)].clone();
                    *cursor += 1;
                    step
                }
                None => match &self.fallback {
                    Some(reply) => MockStep::Reply(reply.clone()),
                    None => {
                        return Err(BackendError::Rejected {
                            status: 404,
                            message: "mock has no reply for this note".into(),
                        })
                    }
                },
            }
        };
        match step {
            MockStep::Reply(r) => Ok(r),
            MockStep::Transient => Err(BackendError::Transient {
                status: Some(503),
                message: "mock transient failure".into(),
            }),
            MockStep::Auth => Err(BackendError::Auth {
                status: Some(401),
                message: "mock authentication failure".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classification() {
        assert!(matches!(
            BackendError::from_status(401, String::new()),
            BackendError::Auth { .. }
        ));
        assert!(BackendError::from_status(429, String::new()).is_retryable());
        assert!(BackendError::from_status(502, String::new()).is_retryable());
        assert!(!BackendError::from_status(400, String::new()).is_retryable());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_retries: 3,
            backoff_base: Duration::from_millis(100),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(400));
    }

    #[test]
    fn config_bounds() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.max_retries = 11;
        assert_eq!(c.validate(), Err(ConfigError::TooManyRetries(11)));
        c.max_retries = 10;
        c.timeout = Duration::ZERO;
        assert_eq!(c.validate(), Err(ConfigError::ZeroTimeout));
    }

    #[test]
    fn config_reads_seconds_from_toml() {
        let c: BackendConfig = toml::from_str("timeout = 2.5\nmax_retries = 1").unwrap();
        assert_eq!(c.timeout, Duration::from_millis(2500));
        assert_eq!(c.max_retries, 1);
        assert_eq!(c.api_key_env_name, DEFAULT_API_KEY_ENV);
    }

    #[test]
    fn retry_stops_on_non_retryable() {
        let policy = RetryPolicy {
            max_retries: 5,
            backoff_base: Duration::ZERO,
        };
        let mut calls = 0;
        let (res, attempts) = with_retry::<()>(&policy, || {
            calls += 1;
            Err(BackendError::Auth {
                status: Some(401),
                message: String::new(),
            })
        });
        assert!(res.is_err());
        assert_eq!((attempts, calls), (1, 1));
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        assert_eq!(truncate("héllo", 2), "hé...");
        assert_eq!(truncate("ok", 5), "ok");
    }
}

//! Chat-completions backend with caching, replay, retries and rate limiting.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::{cache_key, ExchangeCache, PromptExchange};
use super::parse::{parse_single_value, ParseError};
use super::prompt::{render_coin_prompt, render_life_prompt, Prompt};
use super::ratelimit::{Clock, RateLimiter, SystemClock};
use crate::backend::{BackendError, Decision, DecisionBackend, DecisionRequest, StepNonce};
use crate::rng::ChainRng;
use crate::types::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_base_url")]
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configs, caches or logs.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
}

fn default_base_url() -> String {
    "https://api.openai.com/v1".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    60
}
fn default_rpm() -> u32 {
    60
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

impl BackendConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            base_url: default_base_url(),
            model: model.into(),
            api_key_env: default_key_env(),
            temperature: default_temperature(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            requests_per_minute: default_rpm(),
            cache_dir: default_cache_dir(),
            mode: Mode::Live,
        }
    }

    /// Returns the name of the first invalid field with a reason.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.model.trim().is_empty() {
            return Err(("model", "must not be empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(("temperature", format!("must be >= 0, got {}", self.temperature)));
        }
        if self.requests_per_minute == 0 {
            return Err(("requests_per_minute", "must be positive".into()));
        }
        if self.timeout_secs == 0 {
            return Err(("timeout_secs", "must be positive".into()));
        }
        if self.api_key_env.trim().is_empty() {
            return Err(("api_key_env", "must name an environment variable".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(("base_url", format!("not an http(s) URL: {:?}", self.base_url)));
        }
        Ok(())
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.join("exchanges.jsonl")
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable {var} holding the API key is not set")]
    MissingApiKey { var: String },
    #[error("invalid backend config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("request failed after {attempts} attempts: {last}")]
    Http { attempts: u32, last: String },
    #[error("endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("no parseable reply after {attempts} attempts; last reply {last_reply:?}")]
    Parse { attempts: u32, last_reply: String, source: ParseError },
    #[error("replay cache has no exchange {key} (nonce {nonce}, observation {observation})")]
    CacheMiss { key: String, nonce: String, observation: u64 },
    #[error("cache log {path}: {source}")]
    Cache { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body in the chat-completions wire shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model: &str, temperature: f64, prompt: &Prompt) -> Self {
        Self {
            model: model.to_string(),
            temperature,
            messages: vec![
                ChatMessage { role: "system".into(), content: prompt.system.clone() },
                ChatMessage { role: "user".into(), content: prompt.user.clone() },
            ],
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    /// Timeouts, connection errors, 408/429 and 5xx responses.
    #[error("{0}")]
    Retryable(String),
    #[error("{0}")]
    Fatal(String),
}

/// Sends one chat request and returns the reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl HttpTransport {
    pub fn new(endpoint: String, api_key: String, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Http { attempts: 0, last: e.to_string() })?;
        Ok(Self { client, endpoint, api_key })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let msg = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
            return Err(if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
                TransportError::Retryable(msg)
            } else {
                TransportError::Fatal(msg)
            });
        }
        let body: ChatResponse = response
            .json()
            .map_err(|e| TransportError::Retryable(format!("malformed response body: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Retryable("response has no choices".into()))
    }
}

/// A language model behind a chat-completions endpoint, used as a decision
/// backend.
pub struct RemoteBackend {
    id: String,
    config: BackendConfig,
    transport: Option<Box<dyn ChatTransport>>,
    cache: ExchangeCache,
    limiter: RateLimiter,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("id", &self.id)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

const BACKOFF_BASE: Duration = Duration::from_millis(500);
const BACKOFF_CAP: Duration = Duration::from_secs(30);

impl RemoteBackend {
    /// Builds the backend for `config.mode`: live mode needs the key variable
    /// set, replay mode needs an existing cache log.
    pub fn from_config(config: BackendConfig) -> Result<Self, LlmError> {
        check_config(&config)?;
        match config.mode {
            Mode::Replay => Self::replay(config),
            Mode::Live => {
                let key = std::env::var(&config.api_key_env)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| LlmError::MissingApiKey { var: config.api_key_env.clone() })?;
                let transport =
                    HttpTransport::new(config.endpoint(), key, Duration::from_secs(config.timeout_secs))?;
                Self::with_transport(config, Box::new(transport), Arc::new(SystemClock::default()))
            }
        }
    }

    /// Replay-only backend; never touches the network.
    pub fn replay(mut config: BackendConfig) -> Result<Self, LlmError> {
        check_config(&config)?;
        config.mode = Mode::Replay;
        let path = config.cache_path();
        let cache = ExchangeCache::open_read_only(&path).map_err(|source| LlmError::Cache { path, source })?;
        Ok(Self {
            id: format!("remote:{}", config.model),
            limiter: RateLimiter::new(config.requests_per_minute as usize, Arc::new(SystemClock::default())),
            config,
            transport: None,
            cache,
        })
    }

    /// Live backend over an arbitrary transport and clock.
    pub fn with_transport(
        mut config: BackendConfig,
        transport: Box<dyn ChatTransport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, LlmError> {
        check_config(&config)?;
        config.mode = Mode::Live;
        let path = config.cache_path();
        let cache = ExchangeCache::open(&path).map_err(|source| LlmError::Cache { path, source })?;
        Ok(Self {
            id: format!("remote:{}", config.model),
            limiter: RateLimiter::new(config.requests_per_minute as usize, clock),
            config,
            transport: Some(transport),
            cache,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn cache(&self) -> &ExchangeCache {
        &self.cache
    }

    /// Asks the model for an estimate given `observation`.
    pub fn decide_remote(&self, observation: u64, task: &Task, nonce: StepNonce) -> Result<Decision, LlmError> {
        let (prompt, lo, hi) = match task {
            Task::Proportion(t) => (render_coin_prompt(observation, t), 0, t.m_pred),
            Task::Life(t) => (render_life_prompt(observation), observation, t.max_lifespan),
        };
        let nonce = nonce.to_string();
        let key = cache_key(&self.config.model, self.config.temperature, &prompt.system, &prompt.user, &nonce);

        let (value, loose) = match self.cache.lookup(&key) {
            Some(ex) => (ex.parsed.expect("indexed exchanges are parsed"), ex.loose_parse),
            None => match &self.transport {
                None => return Err(LlmError::CacheMiss { key, nonce, observation }),
                Some(transport) => self.query(transport.as_ref(), &prompt, &key, &nonce)?,
            },
        };
        let clamped = value.clamp(lo as i64, hi as i64) as u64;
        Ok(Decision {
            estimate: clamped,
            theta: None,
            loose_parse: loose,
            repaired: clamped as i64 != value,
        })
    }

    fn query(
        &self,
        transport: &dyn ChatTransport,
        prompt: &Prompt,
        key: &str,
        nonce: &str,
    ) -> Result<(i64, bool), LlmError> {
        let request = ChatRequest::new(&self.config.model, self.config.temperature, prompt);
        let attempts = self.config.max_retries + 1;
        let mut last_http = None;
        let mut last_parse = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = BACKOFF_BASE.saturating_mul(1 << (attempt - 1).min(16)).min(BACKOFF_CAP);
                self.limiter.clock().sleep(backoff);
            }
            self.limiter.acquire();
            let raw = match transport.complete(&request) {
                Ok(raw) => raw,
                Err(TransportError::Fatal(msg)) => return Err(LlmError::Rejected(msg)),
                Err(TransportError::Retryable(msg)) => {
                    last_http = Some(msg);
                    continue;
                }
            };
            let parsed = parse_single_value(&raw);
            let exchange = PromptExchange {
                key: key.to_string(),
                nonce: nonce.to_string(),
                model: self.config.model.clone(),
                temperature: self.config.temperature,
                system: prompt.system.clone(),
                user: prompt.user.clone(),
                raw_reply: raw.clone(),
                parsed: parsed.as_ref().ok().map(|p| p.value),
                loose_parse: parsed.as_ref().is_ok_and(|p| p.loose),
                attempt,
                timestamp: chrono::Utc::now().to_rfc3339(),
            };
            self.cache.append(&exchange).map_err(|source| LlmError::Cache {
                path: self.cache.path().to_path_buf(),
                source,
            })?;
            match parsed {
                Ok(p) => return Ok((p.value, p.loose)),
                Err(e) => last_parse = Some((raw, e)),
            }
        }
        match (last_parse, last_http) {
            (Some((last_reply, source)), _) => Err(LlmError::Parse { attempts, last_reply, source }),
            (None, last) => Err(LlmError::Http { attempts, last: last.unwrap_or_default() }),
        }
    }
}

fn check_config(config: &BackendConfig) -> Result<(), LlmError> {
    config
        .validate()
        .map_err(|(field, reason)| LlmError::InvalidConfig { field, reason })
}

impl DecisionBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn decide(&self, req: &DecisionRequest<'_>, _rng: &mut ChainRng) -> Result<Decision, BackendError> {
        Ok(self.decide_remote(req.observation, req.task, req.nonce)?)
    }
}

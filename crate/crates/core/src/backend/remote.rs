use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, Completion, GenerationBackend, GenerationRequest, GenerationResult, SampledBy,
};

pub const ENV_ENDPOINT: &str = "QCODER_ENDPOINT";
pub const ENV_API_KEY: &str = "QCODER_API_KEY";
pub const ENV_MODEL: &str = "QCODER_MODEL";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response body: {0}")]
    Decode(String),
}

impl TransportError {
    /// Client errors other than 408/429 will not succeed on retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => {
                !(400..500).contains(status) || *status == 408 || *status == 429
            }
            _ => true,
        }
    }
}

/// Minimal JSON-over-HTTP surface so tests can swap in a recorder.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

/// Blocking `reqwest` transport.
#[derive(Debug, Clone, Default)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: body.chars().take(512).collect(),
            });
        }
        resp.json::<Value>()
            .map_err(|e| TransportError::Decode(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub url: String,
    pub body: Value,
    pub bearer: Option<String>,
}

/// Test transport: records every call and replays queued responses.
/// An empty queue answers with a connection error.
#[derive(Debug, Clone, Default)]
pub struct RecordingTransport {
    calls: Arc<Mutex<Vec<RecordedCall>>>,
    responses: Arc<Mutex<VecDeque<Result<Value, TransportError>>>>,
}

impl RecordingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_response(&self, response: Result<Value, TransportError>) {
        self.responses.lock().unwrap().push_back(response);
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap().clone()
    }
}

impl HttpTransport for RecordingTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        bearer: Option<&str>,
        _timeout: Duration,
    ) -> Result<Value, TransportError> {
        self.calls.lock().unwrap().push(RecordedCall {
            url: url.to_string(),
            body: body.clone(),
            bearer: bearer.map(String::from),
        });
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Connect("no scripted response".into())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    /// 3 attempts, backoff from 1 s doubling, 120 s per request.
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt as i32))
    }

    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// attempts run out. Yields the final error and the attempts used.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, (TransportError, u32)> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    attempt += 1;
                    if attempt >= attempts || !e.is_retryable() {
                        return Err((e, attempt));
                    }
                    thread::sleep(self.backoff(attempt - 1));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    /// Reads endpoint, token and model name from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| BackendError::Failed {
            backend: "remote".into(),
            message: format!("{ENV_ENDPOINT} is not set"),
        })?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
            model: std::env::var(ENV_MODEL).ok().filter(|s| !s.is_empty()),
            retry: RetryPolicy::default(),
        })
    }
}

/// Client for `POST {prompt, temperature, top_p, max_tokens, n, seed} ->
/// {completions: [...]}`.
pub struct RemoteBackend {
    config: RemoteConfig,
    transport: Arc<dyn HttpTransport>,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self::with_transport(config, Arc::new(ReqwestTransport::default()))
    }

    pub fn with_transport(config: RemoteConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let mut body = json!({
            "prompt": req.prompt,
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_new_tokens,
            "n": req.n,
            "seed": req.params.seed,
        });
        if let Some(model) = &self.config.model {
            body["model"] = json!(model);
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionsBody {
    completions: Vec<String>,
}

impl GenerationBackend for RemoteBackend {
    fn id(&self) -> String {
        match &self.config.model {
            Some(m) => format!("remote:{m}@{}", self.config.endpoint),
            None => format!("remote:{}", self.config.endpoint),
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let body = self.request_body(req);
        let started = Instant::now();
        let retry = self.config.retry;
        let value = retry
            .run(|| {
                self.transport.post_json(
                    &self.config.endpoint,
                    &body,
                    self.config.api_key.as_deref(),
                    retry.request_timeout,
                )
            })
            .map_err(|(e, attempts)| BackendError::Remote {
                endpoint: self.config.endpoint.clone(),
                attempts,
                message: e.to_string(),
            })?;
        let parsed: CompletionsBody =
            serde_json::from_value(value).map_err(|e| BackendError::Remote {
                endpoint: self.config.endpoint.clone(),
                attempts: 1,
                message: format!("malformed completions body: {e}"),
            })?;
        let per = started.elapsed().as_secs_f64() * 1e3 / req.n as f64;
        let mut completions: Vec<Completion> = parsed
            .completions
            .into_iter()
            .take(req.n)
            .map(|t| Completion::ok(t, per))
            .collect();
        while completions.len() < req.n {
            completions.push(Completion::missing(
                "server returned fewer completions than requested",
            ));
        }
        Ok(GenerationResult {
            completions,
            backend_id: self.id(),
            sampled_by: SampledBy::BackendNative,
        })
    }
}

//! Generation backends.
//!
//! Every consumer talks to a [`GenerationBackend`]. Three implementations
//! ship: a scripted [`MockBackend`] for hermetic tests, a [`ToyBackend`]
//! running the local micro-transformer through [`crate::decode`], and a
//! [`RemoteBackend`] speaking JSON over HTTP to an inference server.

mod mock;
mod remote;
mod toy;

use serde::{Deserialize, Serialize};

use crate::decode::DecodingParams;

pub use mock::MockBackend;
pub use remote::{
    HttpTransport, RecordedCall, RecordingTransport, RemoteBackend, RemoteConfig, ReqwestTransport,
    RetryPolicy, TransportError, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL,
};
pub use toy::ToyBackend;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("invalid generation request: {0}")]
    Request(String),
    #[error("backend {endpoint} failed after {attempts} attempt(s): {message}")]
    Remote {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("backend {backend}: {message}")]
    Failed { backend: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub params: DecodingParams,
    /// Completions to draw; must cover the largest Pass@k k.
    pub n: usize,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, params: DecodingParams, n: usize) -> Self {
        Self {
            prompt: prompt.into(),
            params,
            n,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n == 0 {
            return Err(BackendError::Request("n must be >= 1".into()));
        }
        if self.prompt.trim().is_empty() {
            return Err(BackendError::Request("prompt is empty".into()));
        }
        self.params
            .validate()
            .map_err(|e| BackendError::Request(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampledBy {
    LocalDecode,
    BackendNative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub latency_ms: f64,
    /// Set when the slot is padding for a completion the backend did not
    /// return.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Completion {
    pub fn ok(text: impl Into<String>, latency_ms: f64) -> Self {
        Self {
            text: text.into(),
            latency_ms,
            error: None,
        }
    }

    pub fn missing(reason: impl Into<String>) -> Self {
        Self {
            text: String::new(),
            latency_ms: 0.0,
            error: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub completions: Vec<Completion>,
    pub backend_id: String,
    pub sampled_by: SampledBy,
}

impl GenerationResult {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.completions.iter().map(|c| c.text.as_str())
    }
}

pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> String;

    /// Returns exactly `req.n` completions.
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }
}

/// Convenience wrapper around [`GenerationBackend::generate`] that enforces
/// the cardinality contract.
pub fn generate(
    req: &GenerationRequest,
    backend: &dyn GenerationBackend,
) -> Result<GenerationResult, BackendError> {
    req.validate()?;
    let mut result = backend.generate(req)?;
    if result.completions.len() > req.n {
        result.completions.truncate(req.n);
    }
    while result.completions.len() < req.n {
        result.completions.push(Completion::missing(format!(
            "backend {} returned fewer than {} completions",
            result.backend_id, req.n
        )));
    }
    Ok(result)
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pulls code out of a completion: the contents of fenced blocks when any
/// are present (joined by blank lines), else the whole text.
pub fn extract_code(completion: &str) -> String {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in completion.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    // An unterminated fence still yields its body.
    if let Some(body) = current {
        blocks.push(body.join("\n"));
    }
    if blocks.is_empty() {
        completion.to_string()
    } else {
        blocks.join("\n\n")
    }
}

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{
    derive_seed, BackendError, Completion, GenerationBackend, GenerationRequest, GenerationResult,
    SampledBy,
};

type Responder = dyn Fn(&GenerationRequest, usize, u64) -> Option<String> + Send + Sync;

enum Mode {
    Scripted(Vec<String>),
    Responder(Arc<Responder>),
    Failing(String),
}

/// Deterministic in-process backend; never touches the network.
pub struct MockBackend {
    id: String,
    mode: Mode,
    calls: AtomicUsize,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

impl MockBackend {
    /// Completion `i` of every request is `script[i % script.len()]`.
    pub fn scripted<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        let script: Vec<String> = script.into_iter().map(Into::into).collect();
        assert!(!script.is_empty(), "mock script must not be empty");
        Self::with_mode(Mode::Scripted(script))
    }

    /// `f(request, completion_index, completion_seed)`; `None` leaves the
    /// slot empty (padded with an error marker downstream).
    pub fn from_fn(
        f: impl Fn(&GenerationRequest, usize, u64) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        Self::with_mode(Mode::Responder(Arc::new(f)))
    }

    pub fn failing(message: impl Into<String>) -> Self {
        Self::with_mode(Mode::Failing(message.into()))
    }

    fn with_mode(mode: Mode) -> Self {
        Self {
            id: "mock".into(),
            mode,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GenerationBackend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let completions = match &self.mode {
            Mode::Scripted(script) => (0..req.n)
                .map(|i| Completion::ok(script[i % script.len()].clone(), 0.0))
                .collect(),
            Mode::Responder(f) => (0..req.n)
                .filter_map(|i| f(req, i, derive_seed(req.params.seed, i as u64)))
                .map(|t| Completion::ok(t, 0.0))
                .collect(),
            Mode::Failing(message) => {
                return Err(BackendError::Failed {
                    backend: self.id.clone(),
                    message: message.clone(),
                })
            }
        };
        Ok(GenerationResult {
            completions,
            backend_id: self.id.clone(),
            sampled_by: SampledBy::BackendNative,
        })
    }
}

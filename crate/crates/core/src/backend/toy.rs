use std::time::Instant;

use super::{
    derive_seed, BackendError, Completion, GenerationBackend, GenerationRequest, GenerationResult,
    SampledBy,
};
use crate::tinyformer::{self, CharTokenizer, Model};

/// Local backend over a merged micro-transformer. Each completion `i` is
/// decoded with seed `derive_seed(params.seed, i)`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: Model,
    tokenizer: CharTokenizer,
}

impl ToyBackend {
    pub fn new(model: Model, tokenizer: CharTokenizer) -> Self {
        Self { model, tokenizer }
    }

    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }
}

impl GenerationBackend for ToyBackend {
    fn id(&self) -> String {
        format!("toy:{}", &self.model.checksum()[..12])
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let prompt = self.tokenizer.encode_prompt(&req.prompt);
        let completions = (0..req.n)
            .map(|i| {
                let started = Instant::now();
                let params = req.params.with_seed(derive_seed(req.params.seed, i as u64));
                tinyformer::generate(&self.model, &prompt, &params)
                    .map(|ids| {
                        Completion::ok(
                            self.tokenizer.decode(&ids),
                            started.elapsed().as_secs_f64() * 1e3,
                        )
                    })
                    .map_err(|e| BackendError::Failed {
                        backend: self.id(),
                        message: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GenerationResult {
            completions,
            backend_id: self.id(),
            sampled_by: SampledBy::LocalDecode,
        })
    }
}

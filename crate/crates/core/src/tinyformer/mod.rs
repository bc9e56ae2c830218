//! Reference decoder-only micro-transformer with LoRA adapters.
//!
//! Base weights are frozen; only adapter factors are trained, with
//! hand-written backpropagation through the frozen network.

mod checkpoint;
mod lora;
mod matrix;
mod model;
mod tokenizer;
mod toy;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdapterEntry, AdapterManifest};
pub use lora::{
    attach_lora, effective_weight, effective_weight_scaled, merge_adapters, unmerge_adapters,
    AdaptedModel, LoraAdapter, LoraConfig, Target, TargetId,
};
pub use matrix::Matrix;
pub use model::{init_model, Block, LayerNorm, Model, ModelConfig, Precision};
pub use tokenizer::{CharTokenizer, BOS, EOS, PAD, SEP, UNK};
pub use toy::{exact_recall, toy_pairs, train_toy, ToyRecipe, ToyRun};
pub use train::{
    batch_gradients, batch_loss, fit, train_step, AdamWConfig, FitReport, LoraGrads, LrSchedule,
    OptimizerState, StepOutcome, TrainConfig, TrainExample,
};

use crate::decode::{self, DecodeError, DecodingParams};

#[derive(Debug, thiserror::Error)]
pub enum TinyformerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: u64, value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] crate::tensor_io::TensorIoError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Autoregressively extends `prompt` until `EOS`, `max_new_tokens` or the
/// context limit. Returns only the generated ids, without `EOS`.
pub fn generate(
    model: &Model,
    prompt: &[u32],
    params: &DecodingParams,
) -> Result<Vec<u32>, TinyformerError> {
    params.validate()?;
    let max_len = model.config().max_seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut context: Vec<u32> = prompt.to_vec();
    if context.len() >= max_len {
        // Keep the most recent tokens so there is room to generate.
        context.drain(..context.len() + 1 - max_len);
    }
    let mut out = Vec::new();
    while out.len() < params.max_new_tokens && context.len() < max_len {
        let logits = model.forward(&context)?;
        let last = logits.row(logits.rows() - 1);
        let next = decode::sample_token(last, params, &mut rng)? as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        context.push(next);
    }
    Ok(out)
}

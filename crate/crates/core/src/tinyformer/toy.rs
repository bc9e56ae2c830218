//! A small synthetic instruction/code corpus and the recipe that fits it.
//! Used by the `train-toy` command and the end-to-end tests.

use serde::{Deserialize, Serialize};

use super::{
    attach_lora, fit, generate, init_model, AdaptedModel, CharTokenizer, FitReport, LoraConfig,
    Model, ModelConfig, TinyformerError, TrainConfig, TrainExample,
};
use crate::decode::DecodingParams;

const GATES: [&str; 5] = ["H", "X", "Y", "Z", "S"];
const WIRES: usize = 5;

/// Fifty pairs: five single-qubit gates on five wires, each either applied
/// or undone.
pub fn toy_pairs() -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(2 * GATES.len() * WIRES);
    for inverse in [false, true] {
        for gate in GATES {
            for w in 0..WIRES {
                let op = format!("qml.{gate}({w})");
                if inverse {
                    out.push((format!("undo {gate} {w}"), format!("qml.adjoint({op})")));
                } else {
                    out.push((format!("apply {gate} {w}"), op));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub model_seed: u64,
    pub d_model: usize,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub max_updates: u64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            model_seed: 1,
            d_model: 64,
            lora: LoraConfig {
                scale: 4.0,
                seed: 1,
                ..LoraConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 1000,
                micro_batch: 4,
                grad_accum_steps: 4,
                seed: 1,
                ..TrainConfig::default()
            },
            max_updates: 200,
        }
    }
}

/// Output of [`train_toy`].
pub struct ToyRun {
    pub model: AdaptedModel,
    pub tokenizer: CharTokenizer,
    pub report: FitReport,
    /// Loss of the untrained adapters (B = 0, so the base model's loss).
    pub initial_loss: f64,
}

pub fn train_toy(
    pairs: &[(String, String)],
    recipe: &ToyRecipe,
) -> Result<ToyRun, TinyformerError> {
    let tokenizer = CharTokenizer::fit(pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]));
    let mut cfg = ModelConfig::toy(tokenizer.vocab_size(), recipe.model_seed);
    cfg.d_model = recipe.d_model;
    let mut model = attach_lora(init_model(&cfg)?, &recipe.lora)?;
    let examples: Vec<TrainExample> = pairs
        .iter()
        .filter_map(|(i, c)| TrainExample::from_pair(&tokenizer, i, c, cfg.max_seq_len))
        .collect();
    let initial_loss = super::batch_loss(&model, &examples, recipe.train.precision)?;
    let report = fit(
        &mut model,
        &examples,
        &recipe.train,
        Some(recipe.max_updates),
    )?;
    Ok(ToyRun {
        model,
        tokenizer,
        report,
        initial_loss,
    })
}

/// Number of pairs whose greedy completion reproduces the code exactly.
pub fn exact_recall(
    model: &Model,
    tokenizer: &CharTokenizer,
    pairs: &[(String, String)],
) -> Result<usize, TinyformerError> {
    let mut hits = 0;
    for (instruction, code) in pairs {
        let params = DecodingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: code.chars().count() + 8,
            seed: 0,
        };
        let ids = generate(model, &tokenizer.encode_prompt(instruction), &params)?;
        if tokenizer.decode(&ids) == *code {
            hits += 1;
        }
    }
    Ok(hits)
}

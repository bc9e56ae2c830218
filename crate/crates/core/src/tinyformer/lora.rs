//! Low-rank adapters on the attention query and value projections.
//!
//! An adapted projection uses `W' = W + s * A * B` where `A` is
//! `d_model x rank`, `B` is `rank x d_model` and `s` is the configurable
//! scale (1 by default). `A` starts Gaussian and `B` starts at zero, so an
//! adapter is a no-op until trained.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::model::{AdapterPass, Model, Precision};
use super::TinyformerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Query,
    Value,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Value => "value",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = TinyformerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" | "q" => Ok(Target::Query),
            "value" | "v" => Ok(Target::Value),
            other => Err(TinyformerError::Config(format!(
                "unknown LoRA target `{other}` (expected query or value)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetId {
    pub layer: usize,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub dropout: f64,
    pub targets: Vec<Target>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    1.0
}

impl Default for LoraConfig {
    /// Rank 8, dropout 0.05, query and value targets.
    fn default() -> Self {
        Self {
            rank: 8,
            dropout: 0.05,
            targets: vec![Target::Query, Target::Value],
            scale: 1.0,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_model: usize) -> Result<(), TinyformerError> {
        if self.rank == 0 {
            return Err(TinyformerError::Config("LoRA rank must be >= 1".into()));
        }
        if self.rank >= d_model {
            return Err(TinyformerError::Config(format!(
                "LoRA rank {} must be smaller than d_model {d_model}",
                self.rank
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) || self.dropout == 1.0 {
            return Err(TinyformerError::Config(format!(
                "LoRA dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(TinyformerError::Config(
                "LoRA targets must be nonempty".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(TinyformerError::Config("LoRA scale must be finite".into()));
        }
        Ok(())
    }

    /// Parses comma-separated target names.
    pub fn parse_targets(list: &str) -> Result<Vec<Target>, TinyformerError> {
        let mut targets: Vec<Target> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        targets.sort();
        targets.dedup();
        Ok(targets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub attached_to: TargetId,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self, scale: f64) -> Matrix {
        let mut d = self.a.matmul(&self.b);
        d.scale(scale);
        d
    }
}

/// `W + A * B`. Inputs are left untouched.
pub fn effective_weight(w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix, TinyformerError> {
    effective_weight_scaled(w, adapter, 1.0)
}

pub fn effective_weight_scaled(
    w: &Matrix,
    adapter: &LoraAdapter,
    scale: f64,
) -> Result<Matrix, TinyformerError> {
    let (rows, cols) = w.shape();
    let (ar, r) = adapter.a.shape();
    let (br, bc) = adapter.b.shape();
    if ar != rows || br != r || bc != cols {
        return Err(TinyformerError::Dimension(format!(
            "W is {rows}x{cols} but A is {ar}x{r} and B is {br}x{bc}"
        )));
    }
    let mut out = w.clone();
    out.add_assign(&adapter.delta(scale));
    Ok(out)
}

/// A frozen base model plus its trainable adapters.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: Model,
    config: LoraConfig,
    pub(crate) adapters: Vec<LoraAdapter>,
}

pub fn attach_lora(model: Model, lcfg: &LoraConfig) -> Result<AdaptedModel, TinyformerError> {
    let d = model.config().d_model;
    lcfg.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(lcfg.seed);
    let std = 1.0 / (d as f64).sqrt();
    let mut adapters = Vec::new();
    for layer in 0..model.config().n_layers {
        for &target in &lcfg.targets {
            adapters.push(LoraAdapter {
                a: Matrix::random_normal(d, lcfg.rank, std, &mut rng),
                b: Matrix::zeros(lcfg.rank, d),
                attached_to: TargetId { layer, target },
            });
        }
    }
    Ok(AdaptedModel {
        base: model,
        config: lcfg.clone(),
        adapters,
    })
}

impl AdaptedModel {
    /// Rebuilds an adapted model from stored adapters, checking shapes.
    pub fn from_parts(
        base: Model,
        config: LoraConfig,
        adapters: Vec<LoraAdapter>,
    ) -> Result<Self, TinyformerError> {
        let d = base.config().d_model;
        config.validate(d)?;
        for a in &adapters {
            if a.attached_to.layer >= base.config().n_layers {
                return Err(TinyformerError::Config(format!(
                    "adapter targets missing layer {}",
                    a.attached_to.layer
                )));
            }
            if a.a.shape() != (d, config.rank) || a.b.shape() != (config.rank, d) {
                return Err(TinyformerError::Dimension(format!(
                    "adapter {:?} has A {:?} and B {:?}, expected ({d}, {r}) and ({r}, {d})",
                    a.attached_to,
                    a.a.shape(),
                    a.b.shape(),
                    r = config.rank
                )));
            }
        }
        Ok(Self {
            base,
            config,
            adapters,
        })
    }

    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Mutable factors, e.g. for loading or perturbing; shapes must be kept.
    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    /// Sum of `d*r + r*d` over adapters; base parameters are never trainable.
    pub fn trainable_parameter_count(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.a.data().len() + a.b.data().len())
            .sum()
    }

    /// Inference forward: dropout disabled.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix, TinyformerError> {
        self.forward_with(tokens, Precision::Fp64)
    }

    pub fn forward_with(
        &self,
        tokens: &[u32],
        precision: Precision,
    ) -> Result<Matrix, TinyformerError> {
        let mut pass = AdapterPass {
            adapters: &self.adapters,
            scale: self.config.scale,
            dropout: self.config.dropout,
            rng: None,
        };
        Ok(self.base.trace(tokens, Some(&mut pass), precision)?.logits)
    }
}

/// Folds every adapter into its base weight.
pub fn merge_adapters(model: &AdaptedModel) -> Result<Model, TinyformerError> {
    let mut merged = model.base.clone();
    for adapter in &model.adapters {
        let id = adapter.attached_to;
        let w = merged.blocks[id.layer].weight_mut(id.target);
        *w = effective_weight_scaled(w, adapter, model.config.scale)?;
    }
    Ok(merged)
}

/// Subtracts previously merged adapters, recovering the base weights.
pub fn unmerge_adapters(
    merged: &Model,
    adapters: &[LoraAdapter],
    scale: f64,
) -> Result<Model, TinyformerError> {
    let mut base = merged.clone();
    for adapter in adapters {
        let id = adapter.attached_to;
        let block = base
            .blocks
            .get_mut(id.layer)
            .ok_or_else(|| TinyformerError::Config(format!("model has no layer {}", id.layer)))?;
        let w = block.weight_mut(id.target);
        *w = effective_weight_scaled(w, adapter, -scale)?;
    }
    Ok(base)
}

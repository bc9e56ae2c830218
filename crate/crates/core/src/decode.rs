//! Temperature scaling and nucleus (top-p) sampling.
//!
//! The sampling pipeline is temperature -> softmax -> nucleus filter ->
//! categorical draw. A temperature of zero short-circuits to greedy argmax,
//! with ties resolved toward the lowest index.

use rand::Rng;
use serde::{Deserialize, Serialize};

const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error("logit at index {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("empty logit vector")]
    Empty,
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("invalid decoding parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            top_p: 0.5,
            max_new_tokens: 256,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(DecodeError::InvalidParams(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(DecodeError::InvalidParams(format!(
                "top_p must lie in [0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidParams(
                "max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Outcome of temperature scaling.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaled {
    Logits(Vec<f64>),
    /// T = 0: downstream must pick this index without sampling.
    Greedy(usize),
}

fn check_finite(logits: &[f64]) -> Result<(), DecodeError> {
    if logits.is_empty() {
        return Err(DecodeError::Empty);
    }
    match logits.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DecodeError::NonFinite {
            index,
            value: logits[index],
        }),
        None => Ok(()),
    }
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Scaled, DecodeError> {
    check_finite(logits)?;
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(DecodeError::InvalidParams(format!(
            "temperature must be >= 0, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        return Ok(Scaled::Greedy(argmax(logits)));
    }
    Ok(Scaled::Logits(
        logits.iter().map(|l| l / temperature).collect(),
    ))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Token indices ordered by descending probability, ties by ascending index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Keeps the smallest descending-probability prefix whose mass reaches
/// `top_p` (at least one token) and renormalizes it.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Result<Vec<f64>, DecodeError> {
    if probs.is_empty() {
        return Err(DecodeError::InvalidProbabilities("empty".into()));
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(DecodeError::InvalidProbabilities(format!(
            "entry {i} = {} is negative or not finite",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(DecodeError::InvalidProbabilities(format!(
            "sums to {total}"
        )));
    }
    if !(0.0..=1.0).contains(&top_p) {
        return Err(DecodeError::InvalidParams(format!(
            "top_p must lie in [0, 1], got {top_p}"
        )));
    }

    let order = ranked(probs);
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        // Rounding slack so that e.g. 0.5 + 0.3 still reaches 0.8.
        if mass >= top_p - 1e-12 {
            break;
        }
    }

    let mut out = vec![0.0; probs.len()];
    let kept_mass: f64 = order[..kept].iter().map(|&i| probs[i]).sum();
    if kept_mass > 0.0 {
        for &i in &order[..kept] {
            out[i] = probs[i] / kept_mass;
        }
    } else {
        out[order[0]] = 1.0;
    }
    Ok(out)
}

/// Draws from a categorical distribution, never returning a zero-mass index.
pub fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_nonzero = argmax(probs);
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_nonzero = i;
        acc += p;
        if target < acc {
            return i;
        }
    }
    last_nonzero
}

pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    params: &DecodingParams,
    rng: &mut R,
) -> Result<usize, DecodeError> {
    let scaled = match apply_temperature(logits, params.temperature)? {
        Scaled::Greedy(index) => return Ok(index),
        Scaled::Logits(scaled) => scaled,
    };
    let filtered = nucleus_filter(&softmax(&scaled), params.top_p)?;
    Ok(categorical(&filtered, rng))
}

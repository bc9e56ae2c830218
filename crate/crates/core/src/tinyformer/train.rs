use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::AdaptedModel;
use super::matrix::Matrix;
use super::model::{AdapterPass, Precision};
use super::tokenizer::{CharTokenizer, EOS};
use super::TinyformerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `learning_rate` to zero over the planned updates.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum_steps: usize,
    pub precision: Precision,
    pub max_input_tokens: usize,
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Drives dropout masks and epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    /// lr 1e-6, 2 epochs, micro-batch 1, 4 accumulation steps, 15,000 tokens.
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            epochs: 2,
            micro_batch: 1,
            grad_accum_steps: 4,
            precision: Precision::Fp32,
            max_input_tokens: 15_000,
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TinyformerError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TinyformerError::Config("learning_rate must be > 0".into()));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("micro_batch", self.micro_batch),
            ("grad_accum_steps", self.grad_accum_steps),
            ("max_input_tokens", self.max_input_tokens),
        ] {
            if v == 0 {
                return Err(TinyformerError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A tokenized training sequence: `BOS instruction SEP code EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    /// Index of the first response token. Earlier targets are masked.
    pub response_start: usize,
}

impl TrainExample {
    /// Tail-truncates to `max_len` tokens. Returns `None` when nothing of the
    /// response would survive.
    pub fn from_pair(
        tok: &CharTokenizer,
        instruction: &str,
        code: &str,
        max_len: usize,
    ) -> Option<Self> {
        let mut tokens = tok.encode_prompt(instruction);
        let response_start = tokens.len();
        tokens.extend(tok.encode(code));
        tokens.push(EOS);
        tokens.truncate(max_len);
        (tokens.len() > response_start).then_some(Self {
            tokens,
            response_start,
        })
    }

    fn target_positions(&self) -> std::ops::Range<usize> {
        self.response_start - 1..self.tokens.len() - 1
    }
}

/// Gradients for each adapter, aligned with [`AdaptedModel::adapters`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub grads: Vec<(Matrix, Matrix)>,
}

impl LoraGrads {
    fn zeros_like(model: &AdaptedModel) -> Self {
        Self {
            grads: model
                .adapters()
                .iter()
                .map(|a| {
                    (
                        Matrix::zeros(a.a.rows(), a.a.cols()),
                        Matrix::zeros(a.b.rows(), a.b.cols()),
                    )
                })
                .collect(),
        }
    }

    fn add_scaled(&mut self, other: &LoraGrads, s: f64) {
        for ((a, b), (oa, ob)) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(oa, s);
            b.add_scaled(ob, s);
        }
    }

    /// All entries, A before B, adapter by adapter.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads
            .iter()
            .flat_map(|(a, b)| a.data().iter().chain(b.data()).copied())
            .collect()
    }
}

/// Mean next-token cross entropy over the response span and its gradient
/// with respect to the logits.
fn sequence_loss(logits: &Matrix, ex: &TrainExample) -> (f64, Matrix) {
    let positions = ex.target_positions();
    let count = positions.len() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for t in positions {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        let target = ex.tokens[t + 1] as usize;
        loss += log_z - row[target];
        let out = dlogits.row_mut(t);
        for (j, l) in row.iter().enumerate() {
            out[j] = (l - log_z).exp() / count;
        }
        out[target] -= 1.0 / count;
    }
    (loss / count, dlogits)
}

fn check_batch(batch: &[TrainExample]) -> Result<(), TinyformerError> {
    if batch.is_empty() {
        return Err(TinyformerError::Argument("empty batch".into()));
    }
    if let Some(ex) = batch.iter().find(|ex| ex.target_positions().is_empty()) {
        return Err(TinyformerError::Argument(format!(
            "example of {} tokens has no response targets",
            ex.tokens.len()
        )));
    }
    Ok(())
}

/// Batch loss (mean over sequences of the per-sequence mean) and its
/// adapter gradients. `dropout_rng` enables training-mode dropout.
pub fn batch_gradients(
    model: &AdaptedModel,
    batch: &[TrainExample],
    precision: Precision,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, LoraGrads), TinyformerError> {
    check_batch(batch)?;
    let cfg = model.lora_config();
    let mut total = LoraGrads::zeros_like(model);
    let mut loss = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for ex in batch {
        let mut pass = AdapterPass {
            adapters: model.adapters(),
            scale: cfg.scale,
            dropout: cfg.dropout,
            rng: dropout_rng.as_deref_mut(),
        };
        let trace = model.base().trace(&ex.tokens, Some(&mut pass), precision)?;
        let (l, dlogits) = sequence_loss(&trace.logits, ex);
        let grads = LoraGrads {
            grads: model
                .base()
                .adapter_backward(&trace, &dlogits, model.adapters(), cfg.scale),
        };
        total.add_scaled(&grads, weight);
        loss += weight * l;
    }
    Ok((loss, total))
}

/// Inference-mode loss, no dropout.
pub fn batch_loss(
    model: &AdaptedModel,
    batch: &[TrainExample],
    precision: Precision,
) -> Result<f64, TinyformerError> {
    check_batch(batch)?;
    let mut loss = 0.0;
    for ex in batch {
        let logits = model.forward_with(&ex.tokens, precision)?;
        loss += sequence_loss(&logits, ex).0;
    }
    Ok(loss / batch.len() as f64)
}

/// AdamW moments plus the gradient-accumulation buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Optimizer updates applied so far.
    pub updates: u64,
    /// Micro-batches processed so far.
    pub micro_steps: u64,
    pending: usize,
    accum: Option<LoraGrads>,
    last: Option<LoraGrads>,
    first: Vec<(Matrix, Matrix)>,
    second: Vec<(Matrix, Matrix)>,
    rng: ChaCha8Rng,
}

impl OptimizerState {
    pub fn new(model: &AdaptedModel, seed: u64) -> Self {
        let zeros = LoraGrads::zeros_like(model).grads;
        Self {
            updates: 0,
            micro_steps: 0,
            pending: 0,
            accum: None,
            last: None,
            first: zeros.clone(),
            second: zeros,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Gradient accumulated since the last update.
    pub fn accumulated(&self) -> Option<&LoraGrads> {
        self.accum.as_ref()
    }

    /// The averaged gradient applied by the most recent update.
    pub fn last_gradient(&self) -> Option<&LoraGrads> {
        self.last.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Whether this micro-batch completed an accumulation window.
    pub updated: bool,
}

/// Processes one micro-batch; every `grad_accum_steps` micro-batches the
/// averaged gradient is applied with AdamW. Base weights are never touched.
pub fn train_step(
    model: &mut AdaptedModel,
    batch: &[TrainExample],
    tcfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<StepOutcome, TinyformerError> {
    tcfg.validate()?;
    let (loss, grads) = batch_gradients(model, batch, tcfg.precision, Some(&mut state.rng))?;
    if !loss.is_finite() {
        return Err(TinyformerError::NonFinite {
            step: state.micro_steps,
            value: loss,
        });
    }
    state.micro_steps += 1;
    let inv = 1.0 / tcfg.grad_accum_steps as f64;
    match &mut state.accum {
        Some(acc) => acc.add_scaled(&grads, inv),
        None => {
            let mut acc = LoraGrads::zeros_like(model);
            acc.add_scaled(&grads, inv);
            state.accum = Some(acc);
        }
    }
    state.pending += 1;
    if state.pending < tcfg.grad_accum_steps {
        return Ok(StepOutcome {
            loss,
            updated: false,
        });
    }

    let acc = state.accum.take().expect("accumulator present");
    state.pending = 0;
    state.updates += 1;
    let opt = &tcfg.optimizer;
    let t = state.updates as i32;
    let bias1 = 1.0 - opt.beta1.powi(t);
    let bias2 = 1.0 - opt.beta2.powi(t);
    let lr = tcfg.learning_rate;
    for (i, (ga, gb)) in acc.grads.iter().enumerate() {
        let adapter = &mut model.adapters[i];
        let (ma, mb) = &mut state.first[i];
        let (va, vb) = &mut state.second[i];
        for (param, grad, m, v) in [(&mut adapter.a, ga, ma, va), (&mut adapter.b, gb, mb, vb)] {
            let p = param.data_mut();
            let g = grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for j in 0..p.len() {
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p[j]);
            }
        }
    }
    state.last = Some(acc);
    Ok(StepOutcome {
        loss,
        updated: true,
    })
}

/// Summary of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean micro-batch loss of each optimizer update.
    pub loss_trace: Vec<f64>,
    pub updates: u64,
    pub micro_steps: u64,
}

/// Runs `epochs` shuffled passes over `examples` (or stops after
/// `max_updates` optimizer updates).
pub fn fit(
    model: &mut AdaptedModel,
    examples: &[TrainExample],
    tcfg: &TrainConfig,
    max_updates: Option<u64>,
) -> Result<FitReport, TinyformerError> {
    tcfg.validate()?;
    if examples.is_empty() {
        return Err(TinyformerError::Argument("no training examples".into()));
    }
    let micro_per_epoch = examples.len().div_ceil(tcfg.micro_batch) as u64;
    let mut planned = tcfg.epochs as u64 * micro_per_epoch / tcfg.grad_accum_steps as u64;
    if let Some(m) = max_updates {
        planned = planned.min(m);
    }
    let planned = planned.max(1);
    let mut step_cfg = tcfg.clone();
    let mut state = OptimizerState::new(model, tcfg.seed);
    let mut shuffle = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::new();
    let mut window = Vec::new();
    'epochs: for _ in 0..tcfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(tcfg.micro_batch) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            if tcfg.lr_schedule == LrSchedule::LinearDecay {
                let remaining = planned.saturating_sub(state.updates) as f64 / planned as f64;
                step_cfg.learning_rate = tcfg.learning_rate * remaining.max(1e-3);
            }
            let out = train_step(model, &batch, &step_cfg, &mut state)?;
            window.push(out.loss);
            if out.updated {
                trace.push(window.iter().sum::<f64>() / window.len() as f64);
                window.clear();
                if max_updates.is_some_and(|m| state.updates >= m) {
                    break 'epochs;
                }
            }
        }
    }
    Ok(FitReport {
        loss_trace: trace,
        updates: state.updates,
        micro_steps: state.micro_steps,
    })
}

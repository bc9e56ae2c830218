use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{LoraAdapter, Target};
use super::matrix::Matrix;
use super::TinyformerError;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// d_model 64, 2 layers, 2 heads.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            vocab_size,
            max_seq_len: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TinyformerError> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(TinyformerError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(TinyformerError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Rounding applied to the residual stream and logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    /// No rounding; used by gradient checks.
    Fp64,
    #[default]
    Fp32,
    #[serde(rename = "fp16-emulated")]
    Fp16Emulated,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp64" => Ok(Precision::Fp64),
            "fp32" => Ok(Precision::Fp32),
            "fp16-emulated" | "fp16" => Ok(Precision::Fp16Emulated),
            other => Err(format!(
                "unknown precision `{other}` (fp64, fp32, fp16-emulated)"
            )),
        }
    }
}

impl Precision {
    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::Fp64 => v,
            Precision::Fp32 => v as f32 as f64,
            Precision::Fp16Emulated => half::f16::from_f64(v).to_f64(),
        }
    }

    fn apply(self, m: &mut Matrix) {
        if self != Precision::Fp64 {
            m.map_inplace(|v| self.round(v));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, NormCache) {
        let (rows, d) = x.shape();
        let mut xhat = Matrix::zeros(rows, d);
        let mut out = Matrix::zeros(rows, d);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.set(i, j, h);
                out.set(i, j, h * self.gain[j] + self.bias[j]);
            }
        }
        (out, NormCache { xhat, rstd })
    }

    fn backward(&self, cache: &NormCache, dy: &Matrix) -> Matrix {
        let (rows, d) = dy.shape();
        let mut dx = Matrix::zeros(rows, d);
        for i in 0..rows {
            let xhat = cache.xhat.row(i);
            let dxhat: Vec<f64> = dy
                .row(i)
                .iter()
                .zip(&self.gain)
                .map(|(g, w)| g * w)
                .collect();
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = cache.rstd[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Block {
    pub fn weight(&self, target: Target) -> &Matrix {
        match target {
            Target::Query => &self.wq,
            Target::Value => &self.wv,
        }
    }

    pub(crate) fn weight_mut(&mut self, target: Target) -> &mut Matrix {
        match target {
            Target::Query => &mut self.wq,
            Target::Value => &mut self.wv,
        }
    }
}

/// Pre-norm decoder-only transformer with learned positions.
///
/// Activations are row vectors, so a projection is `x * W` with `W` of
/// shape `d_model x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) tok_emb: Matrix,
    pub(crate) pos_emb: Matrix,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNorm,
    pub(crate) head: Matrix,
}

pub fn init_model(cfg: &ModelConfig) -> Result<Model, TinyformerError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let proj = 1.0 / (d as f64).sqrt();
    let tok_emb = Matrix::random_normal(cfg.vocab_size, d, 1.0, &mut rng);
    let pos_emb = Matrix::random_normal(cfg.max_seq_len, d, 0.5, &mut rng);
    let blocks = (0..cfg.n_layers)
        .map(|_| Block {
            ln1: LayerNorm::new(d),
            wq: Matrix::random_normal(d, d, proj, &mut rng),
            wk: Matrix::random_normal(d, d, proj, &mut rng),
            wv: Matrix::random_normal(d, d, proj, &mut rng),
            wo: Matrix::random_normal(d, d, proj, &mut rng),
            ln2: LayerNorm::new(d),
            w1: Matrix::random_normal(d, cfg.d_ff(), proj, &mut rng),
            b1: vec![0.0; cfg.d_ff()],
            w2: Matrix::random_normal(cfg.d_ff(), d, 1.0 / (cfg.d_ff() as f64).sqrt(), &mut rng),
            b2: vec![0.0; d],
        })
        .collect();
    let head = Matrix::random_normal(d, cfg.vocab_size, proj, &mut rng);
    Ok(Model {
        config: cfg.clone(),
        tok_emb,
        pos_emb,
        blocks,
        ln_f: LayerNorm::new(d),
        head,
    })
}

/// Adapter inputs for one forward pass.
pub(crate) struct AdapterPass<'a> {
    pub adapters: &'a [LoraAdapter],
    pub scale: f64,
    pub dropout: f64,
    /// Present only in training mode; drives dropout masks.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

struct AdapterCache {
    index: usize,
    /// Dropped-out adapter input.
    input: Matrix,
    /// `None` when dropout was inactive.
    mask: Option<Matrix>,
    /// `input * A`
    low: Matrix,
}

struct LayerTrace {
    ln1: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    adapters: Vec<(Target, AdapterCache)>,
    ln2: NormCache,
    u: Matrix,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    ln_f: NormCache,
    pub logits: Matrix,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Logits of shape `(tokens.len(), vocab_size)`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix, TinyformerError> {
        self.forward_with(tokens, Precision::Fp64)
    }

    pub fn forward_with(
        &self,
        tokens: &[u32],
        precision: Precision,
    ) -> Result<Matrix, TinyformerError> {
        Ok(self.trace(tokens, None, precision)?.logits)
    }

    /// Total number of base parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.config.d_model;
        let ln = 2 * d;
        let per_block = 2 * ln + 4 * d * d + 2 * d * self.config.d_ff() + self.config.d_ff() + d;
        self.tok_emb.data().len()
            + self.pos_emb.data().len()
            + self.blocks.len() * per_block
            + ln
            + self.head.data().len()
    }

    /// SHA-256 over every base parameter's bit pattern.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |values: &[f64]| {
            for v in values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        feed(self.tok_emb.data());
        feed(self.pos_emb.data());
        for b in &self.blocks {
            for ln in [&b.ln1, &b.ln2] {
                feed(&ln.gain);
                feed(&ln.bias);
            }
            for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                feed(w.data());
            }
            feed(&b.b1);
            feed(&b.b2);
        }
        feed(&self.ln_f.gain);
        feed(&self.ln_f.bias);
        feed(self.head.data());
        hex::encode(hasher.finalize())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), TinyformerError> {
        if tokens.is_empty() {
            return Err(TinyformerError::Argument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(TinyformerError::Argument(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(TinyformerError::Argument(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn adapter_forward(
        input: &Matrix,
        adapter: &LoraAdapter,
        index: usize,
        pass: &mut AdapterPass<'_>,
    ) -> (Matrix, AdapterCache) {
        let (mask, dropped) = match pass.rng.as_deref_mut() {
            Some(rng) if pass.dropout > 0.0 => {
                let keep = 1.0 - pass.dropout;
                let mut mask = Matrix::zeros(input.rows(), input.cols());
                for v in mask.data_mut() {
                    *v = if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                }
                let mut dropped = input.clone();
                for (x, m) in dropped.data_mut().iter_mut().zip(mask.data()) {
                    *x *= m;
                }
                (Some(mask), dropped)
            }
            _ => (None, input.clone()),
        };
        let low = dropped.matmul(&adapter.a);
        let mut delta = low.matmul(&adapter.b);
        delta.scale(pass.scale);
        (
            delta,
            AdapterCache {
                index,
                input: dropped,
                mask,
                low,
            },
        )
    }

    pub(crate) fn trace(
        &self,
        tokens: &[u32],
        mut adapters: Option<&mut AdapterPass<'_>>,
        precision: Precision,
    ) -> Result<Trace, TinyformerError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let len = tokens.len();
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();

        let mut h = Matrix::zeros(len, d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = h.row_mut(i);
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.tok_emb.row(t as usize))
                .zip(self.pos_emb.row(i))
            {
                *o = e + p;
            }
        }
        precision.apply(&mut h);

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let (a, ln1) = block.ln1.forward(&h);
            let mut q = a.matmul(&block.wq);
            let k = a.matmul(&block.wk);
            let mut v = a.matmul(&block.wv);
            let mut caches = Vec::new();
            if let Some(pass) = adapters.as_deref_mut() {
                for (index, adapter) in pass.adapters.iter().enumerate() {
                    if adapter.attached_to.layer != layer {
                        continue;
                    }
                    let (delta, cache) = Self::adapter_forward(&a, adapter, index, pass);
                    match adapter.attached_to.target {
                        Target::Query => q.add_assign(&delta),
                        Target::Value => v.add_assign(&delta),
                    }
                    caches.push((adapter.attached_to.target, cache));
                }
            }

            let mut concat = Matrix::zeros(len, d);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = q.col_slice(head * dh, dh);
                let kh = k.col_slice(head * dh, dh);
                let vh = v.col_slice(head * dh, dh);
                let mut p = qh.matmul_t(&kh);
                for i in 0..len {
                    let row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        if j > i {
                            *s = 0.0;
                        } else {
                            *s *= att_scale;
                            max = max.max(*s);
                        }
                    }
                    let mut total = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= total;
                    }
                }
                concat.set_col_slice(head * dh, &p.matmul(&vh));
                probs.push(p);
            }
            h.add_assign(&concat.matmul(&block.wo));

            let (m, ln2) = block.ln2.forward(&h);
            let mut u = m.matmul(&block.w1);
            for i in 0..len {
                for (x, b) in u.row_mut(i).iter_mut().zip(&block.b1) {
                    *x += b;
                }
            }
            let mut g = u.clone();
            g.map_inplace(gelu);
            let mut z = g.matmul(&block.w2);
            for i in 0..len {
                for (x, b) in z.row_mut(i).iter_mut().zip(&block.b2) {
                    *x += b;
                }
            }
            h.add_assign(&z);
            precision.apply(&mut h);

            layers.push(LayerTrace {
                ln1,
                q,
                k,
                v,
                probs,
                adapters: caches,
                ln2,
                u,
            });
        }

        let (f, ln_f) = self.ln_f.forward(&h);
        let mut logits = f.matmul(&self.head);
        precision.apply(&mut logits);
        Ok(Trace {
            layers,
            ln_f,
            logits,
        })
    }

    /// Backpropagates `dlogits` through the frozen network and returns the
    /// gradient of every adapter as `(dA, dB)`, indexed like `adapters`.
    pub(crate) fn adapter_backward(
        &self,
        trace: &Trace,
        dlogits: &Matrix,
        adapters: &[LoraAdapter],
        scale: f64,
    ) -> Vec<(Matrix, Matrix)> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let len = dlogits.rows();
        let mut grads: Vec<(Matrix, Matrix)> = adapters
            .iter()
            .map(|a| {
                (
                    Matrix::zeros(a.a.rows(), a.a.cols()),
                    Matrix::zeros(a.b.rows(), a.b.cols()),
                )
            })
            .collect();

        let df = dlogits.matmul_t(&self.head);
        let mut dh_res = self.ln_f.backward(&trace.ln_f, &df);

        for (block, lt) in self.blocks.iter().zip(&trace.layers).rev() {
            // MLP branch.
            let dg = dh_res.matmul_t(&block.w2);
            let mut du = dg;
            for (x, u) in du.data_mut().iter_mut().zip(lt.u.data()) {
                *x *= gelu_grad(*u);
            }
            let dm = du.matmul_t(&block.w1);
            dh_res.add_assign(&block.ln2.backward(&lt.ln2, &dm));

            // Attention branch.
            let dconcat = dh_res.matmul_t(&block.wo);
            let mut dq = Matrix::zeros(len, cfg.d_model);
            let mut dk = Matrix::zeros(len, cfg.d_model);
            let mut dv = Matrix::zeros(len, cfg.d_model);
            for (head, p) in lt.probs.iter().enumerate() {
                let doh = dconcat.col_slice(head * dh, dh);
                let qh = lt.q.col_slice(head * dh, dh);
                let kh = lt.k.col_slice(head * dh, dh);
                let vh = lt.v.col_slice(head * dh, dh);
                let dp = doh.matmul_t(&vh);
                dv.set_col_slice(head * dh, &p.t_matmul(&doh));
                let mut ds = Matrix::zeros(len, len);
                for i in 0..len {
                    let pr = p.row(i);
                    let dpr = dp.row(i);
                    let dot: f64 = (0..=i).map(|j| pr[j] * dpr[j]).sum();
                    let out = ds.row_mut(i);
                    for j in 0..=i {
                        out[j] = pr[j] * (dpr[j] - dot) * att_scale;
                    }
                }
                dq.set_col_slice(head * dh, &ds.matmul(&kh));
                dk.set_col_slice(head * dh, &ds.t_matmul(&qh));
            }

            let mut da = dq.matmul_t(&block.wq);
            da.add_assign(&dk.matmul_t(&block.wk));
            da.add_assign(&dv.matmul_t(&block.wv));
            for (target, cache) in &lt.adapters {
                let adapter = &adapters[cache.index];
                let mut dout = match target {
                    Target::Query => dq.clone(),
                    Target::Value => dv.clone(),
                };
                dout.scale(scale);
                let (ga, gb) = &mut grads[cache.index];
                gb.add_assign(&cache.low.t_matmul(&dout));
                let dlow = dout.matmul_t(&adapter.b);
                ga.add_assign(&cache.input.t_matmul(&dlow));
                let mut dinput = dlow.matmul_t(&adapter.a);
                if let Some(mask) = &cache.mask {
                    for (x, m) in dinput.data_mut().iter_mut().zip(mask.data()) {
                        *x *= m;
                    }
                }
                da.add_assign(&dinput);
            }
            dh_res.add_assign(&block.ln1.backward(&lt.ln1, &da));
        }
        grads
    }
}

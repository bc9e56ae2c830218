//! Dense retrieval over an instruction corpus and few-shot prompt assembly.
//!
//! Instructions are embedded once into an immutable [`Index`]. A query is
//! embedded with the same embedder, scored against every entry by cosine
//! similarity (exact scan), and the best instruction/code pairs are packed
//! into a prompt under a token budget.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{HttpTransport, ReqwestTransport, RetryPolicy};
use crate::corpus::{truncate_tail, InstructionSample, MAX_INPUT_TOKENS};
use crate::tensor_io::{self, Array, TensorIoError};
use crate::TokenCounter;

pub const ENV_EMBED_ENDPOINT: &str = "QCODER_EMBED_ENDPOINT";
pub const ENV_EMBED_API_KEY: &str = "QCODER_EMBED_API_KEY";

/// Default number of retrieved examples.
pub const DEFAULT_K: usize = 3;

const INDEX_FORMAT_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedder {embedder} failed: {message}")]
    Embedder { embedder: String, message: String },
    #[error("duplicate sample id `{0}` in index build")]
    DuplicateId(String),
    #[error("expected {expected}-dimensional vectors, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("index was built with `{index}` but the query embedder is `{query}`")]
    EmbedderMismatch { index: String, query: String },
    #[error("{0}")]
    Argument(String),
    #[error("hit `{0}` is not in the corpus")]
    UnknownSample(String),
    #[error("budget of {budget} tokens cannot hold the query prompt ({needed} tokens)")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error("index at {path}: {reason}")]
    Persist { path: String, reason: String },
}

/// Embedding with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = l2(values.iter().copied());
        Self { values, norm }
    }
}

fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

pub trait Embedder: Send + Sync {
    /// Recorded in the index manifest; queries must use the same embedder.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

pub fn embed(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let mut out = embedder.embed_batch(&[text])?;
    let values = out.pop().ok_or_else(|| RetrievalError::Embedder {
        embedder: embedder.id(),
        message: "no vector returned".into(),
    })?;
    check_vector(&values, embedder)?;
    Ok(EmbeddingVector::new(values))
}

fn check_vector(values: &[f64], embedder: &dyn Embedder) -> Result<(), RetrievalError> {
    if values.len() != embedder.dim() {
        return Err(RetrievalError::Dimension {
            expected: embedder.dim(),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::Embedder {
            embedder: embedder.id(),
            message: "non-finite vector entry".into(),
        });
    }
    Ok(())
}

/// Offline feature-hashing embedder: each token (lowercased run of
/// alphanumerics or `_`) adds 1 to bucket `fnv1a(token) % dim`, then the
/// vector is L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        let words: Vec<String> = text
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            // Punctuation-only text still gets a nonzero vector.
            text.split_whitespace().map(String::from).collect()
        } else {
            words
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in Self::tokens(text) {
            v[self.bucket(&t)] += 1.0;
        }
        let norm = l2(v.iter().copied());
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for an embedding service: `POST {texts: [...]}` returning
/// `{vectors: [[...], ...]}`.
pub struct HttpEmbedder {
    endpoint: String,
    api_key: Option<String>,
    dim: usize,
    retry: RetryPolicy,
    transport: Arc<dyn HttpTransport>,
}

impl fmt::Debug for HttpEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpEmbedder")
            .field("endpoint", &self.endpoint)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        Self::with_transport(
            endpoint,
            api_key,
            dim,
            Arc::new(ReqwestTransport::default()),
        )
    }

    pub fn with_transport(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            dim,
            retry: RetryPolicy::default(),
            transport,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn from_env(dim: usize) -> Result<Self, RetrievalError> {
        let endpoint = std::env::var(ENV_EMBED_ENDPOINT).map_err(|_| RetrievalError::Embedder {
            embedder: "http".into(),
            message: format!("{ENV_EMBED_ENDPOINT} is not set"),
        })?;
        let key = std::env::var(ENV_EMBED_API_KEY)
            .ok()
            .filter(|k| !k.is_empty());
        Ok(Self::new(endpoint, key, dim))
    }
}

#[derive(Deserialize)]
struct VectorsBody {
    vectors: Vec<Vec<f64>>,
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http-{}:{}", self.dim, self.endpoint)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let body = json!({ "texts": texts });
        let fail = |message: String| RetrievalError::Embedder {
            embedder: self.id(),
            message,
        };
        let timeout: Duration = self.retry.request_timeout;
        let value = self
            .retry
            .run(|| {
                self.transport
                    .post_json(&self.endpoint, &body, self.api_key.as_deref(), timeout)
            })
            .map_err(|(e, attempts)| fail(format!("{e} (after {attempts} attempt(s))")))?;
        let parsed: VectorsBody =
            serde_json::from_value(value).map_err(|e| fail(format!("malformed body: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(fail(format!(
                "{} vectors for {} texts",
                parsed.vectors.len(),
                texts.len()
            )));
        }
        Ok(parsed.vectors)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    id: String,
    /// Stored precision is f32, matching the on-disk layout, so a loaded
    /// index scores bit-for-bit like the one that was saved.
    vector: Vec<f32>,
    norm: f64,
}

impl Entry {
    fn new(id: String, vector: Vec<f32>) -> Self {
        let norm = l2(vector.iter().map(|&v| v as f64));
        Self { id, vector, norm }
    }
}

/// Immutable exact-scan index.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    embedder: String,
    dim: usize,
    entries: Vec<Entry>,
    samples: Vec<InstructionSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub sample_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Embeds every sample's instruction. Oversized instructions are cut to
/// the training length limit first.
pub fn build_index(
    samples: &[InstructionSample],
    embedder: &dyn Embedder,
) -> Result<Index, RetrievalError> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(RetrievalError::DuplicateId(s.id.clone()));
        }
    }
    let texts: Vec<String> = samples
        .iter()
        .map(|s| {
            if s.oversized {
                truncate_tail(&s.instruction, MAX_INPUT_TOKENS)
            } else {
                s.instruction.clone()
            }
        })
        .collect();
    let mut entries = Vec::with_capacity(samples.len());
    for (chunk_samples, chunk_texts) in samples.chunks(EMBED_BATCH).zip(texts.chunks(EMBED_BATCH)) {
        let refs: Vec<&str> = chunk_texts.iter().map(String::as_str).collect();
        let vectors = embedder.embed_batch(&refs)?;
        for (s, v) in chunk_samples.iter().zip(vectors) {
            check_vector(&v, embedder)?;
            entries.push(Entry::new(
                s.id.clone(),
                v.iter().map(|&x| x as f32).collect(),
            ));
        }
    }
    Ok(Index {
        embedder: embedder.id(),
        dim: embedder.dim(),
        entries,
        samples: samples.to_vec(),
    })
}

impl Index {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[InstructionSample] {
        &self.samples
    }

    pub fn sample(&self, id: &str) -> Option<&InstructionSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// `(id, stored vector)` pairs in build order.
    pub fn vectors(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries
            .iter()
            .map(|e| (e.id.as_str(), e.vector.as_slice()))
    }

    /// Ranks entries against an already-embedded query.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::Argument("k must be >= 1".into()));
        }
        if query.values.len() != self.dim {
            return Err(RetrievalError::Dimension {
                expected: self.dim,
                got: query.values.len(),
            });
        }
        let mut scored: Vec<(f64, &str)> = self
            .entries
            .iter()
            .map(|e| {
                (
                    cosine(&query.values, query.norm, &e.vector, e.norm),
                    e.id.as_str(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| RetrievalHit {
                sample_id: id.to_string(),
                score,
                rank: i + 1,
            })
            .collect())
    }
}

fn cosine(q: &[f64], q_norm: f64, v: &[f32], v_norm: f64) -> f64 {
    if q_norm == 0.0 || v_norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = q.iter().zip(v).map(|(a, &b)| a * b as f64).sum();
    (dot / (q_norm * v_norm)).clamp(-1.0, 1.0)
}

/// Top-`k` entries by cosine similarity, ties by ascending id.
pub fn query_top_k(
    index: &Index,
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if embedder.id() != index.embedder {
        return Err(RetrievalError::EmbedderMismatch {
            index: index.embedder.clone(),
            query: embedder.id(),
        });
    }
    if index.is_empty() {
        if k == 0 {
            return Err(RetrievalError::Argument("k must be >= 1".into()));
        }
        return Ok(Vec::new());
    }
    index.search(&embed(query, embedder)?, k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub included_ids: Vec<String>,
    pub token_count: usize,
    pub budget: usize,
}

const PREAMBLE: &str = "You are an expert PennyLane programmer. Answer with Python code.\n";

fn render(pairs: &[&InstructionSample], query: &str) -> String {
    let mut out = String::from(PREAMBLE);
    if !pairs.is_empty() {
        out.push_str("\nHere are related examples.\n");
    }
    for (i, s) in pairs.iter().enumerate() {
        out.push_str(&format!(
            "\n### Example {}\nInstruction: {}\nCode:\n```python\n{}\n```\n",
            i + 1,
            s.instruction.trim(),
            s.code.trim_end()
        ));
    }
    out.push_str(&format!("\n### Task\n{}\n", query.trim()));
    out
}

/// Packs whole instruction/code pairs, best hit first, while the prompt
/// stays within `budget` tokens. A pair that does not fit is skipped whole.
pub fn assemble_context(
    hits: &[RetrievalHit],
    corpus: &[InstructionSample],
    user_query: &str,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<AssembledPrompt, RetrievalError> {
    if user_query.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let base = render(&[], user_query);
    let base_tokens = counter.count(&base);
    if base_tokens > budget {
        return Err(RetrievalError::BudgetTooSmall {
            needed: base_tokens,
            budget,
        });
    }
    let mut ordered: Vec<&RetrievalHit> = hits.iter().collect();
    ordered.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });

    let mut included: Vec<&InstructionSample> = Vec::new();
    let mut text = base;
    let mut tokens = base_tokens;
    for hit in ordered {
        let sample = corpus
            .iter()
            .find(|s| s.id == hit.sample_id)
            .ok_or_else(|| RetrievalError::UnknownSample(hit.sample_id.clone()))?;
        if included.iter().any(|s| s.id == sample.id) {
            continue;
        }
        included.push(sample);
        let candidate = render(&included, user_query);
        let n = counter.count(&candidate);
        if n <= budget {
            text = candidate;
            tokens = n;
        } else {
            included.pop();
        }
    }
    Ok(AssembledPrompt {
        text,
        included_ids: included.iter().map(|s| s.id.clone()).collect(),
        token_count: tokens,
        budget,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    embedder: String,
    dim: usize,
    ids: Vec<String>,
}

/// Writes `index.json`, `vectors.bin` and `samples.json` into `dir`.
pub fn save_index(index: &Index, dir: &Path) -> Result<(), RetrievalError> {
    let persist = |e: std::io::Error| RetrievalError::Persist {
        path: dir.display().to_string(),
        reason: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(persist)?;
    let manifest = IndexManifest {
        format_version: INDEX_FORMAT_VERSION,
        embedder: index.embedder.clone(),
        dim: index.dim,
        ids: index.entries.iter().map(|e| e.id.clone()).collect(),
    };
    let values: Vec<f32> = index
        .entries
        .iter()
        .flat_map(|e| e.vector.iter().copied())
        .collect();
    tensor_io::write(
        &dir.join("vectors.bin"),
        &Array::new(vec![index.len(), index.dim], values),
    )?;
    fs::write(dir.join("index.json"), pretty(&manifest)).map_err(persist)?;
    fs::write(dir.join("samples.json"), pretty(&index.samples)).map_err(persist)?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("index metadata serializes") + "\n"
}

pub fn load_index(dir: &Path) -> Result<Index, RetrievalError> {
    let bad = |reason: String| RetrievalError::Persist {
        path: dir.display().to_string(),
        reason,
    };
    let read =
        |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| bad(format!("{name}: {e}")));
    let manifest: IndexManifest =
        serde_json::from_str(&read("index.json")?).map_err(|e| bad(format!("index.json: {e}")))?;
    if manifest.format_version != INDEX_FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let samples: Vec<InstructionSample> = serde_json::from_str(&read("samples.json")?)
        .map_err(|e| bad(format!("samples.json: {e}")))?;
    let array = tensor_io::read(&dir.join("vectors.bin"))?;
    let n = manifest.ids.len();
    if array.shape != [n, manifest.dim] {
        return Err(bad(format!(
            "vectors.bin has shape {:?}, expected [{n}, {}]",
            array.shape, manifest.dim
        )));
    }
    let entries = manifest
        .ids
        .into_iter()
        .zip(array.values.chunks(manifest.dim.max(1)))
        .map(|(id, v)| Entry::new(id, v.to_vec()))
        .collect();
    Ok(Index {
        embedder: manifest.embedder,
        dim: manifest.dim,
        entries,
        samples,
    })
}

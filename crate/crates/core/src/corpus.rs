//! Instruction/code corpora.
//!
//! Records are `{id, instruction, code, source, category}` either one per
//! line (`jsonl`) or as a single JSON array. Loading never drops a record
//! silently: every rejected record comes back with its position and reason.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{self, BackendError, GenerationBackend, GenerationRequest};
use crate::decode::DecodingParams;
use crate::{TaskCategory, TokenCounter, WhitespaceCounter};

/// Training cut-off; longer samples are flagged `oversized`.
pub const MAX_INPUT_TOKENS: usize = 15_000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a valid {format} document: {reason}")]
    Format {
        path: PathBuf,
        format: CorpusFormat,
        reason: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("augmenting `{id}` failed: {source}")]
    Backend {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("backend returned an empty instruction for `{id}`; original kept")]
    EmptyOutput { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    JsonArray,
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::JsonArray => "json-array",
        })
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "json-array" | "json" => Ok(CorpusFormat::JsonArray),
            other => Err(format!(
                "unknown corpus format `{other}` (expected jsonl or json-array)"
            )),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Github,
    Book,
    Docs,
    #[default]
    Other,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Github => "github",
            Source::Book => "book",
            Source::Docs => "docs",
            Source::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    pub code: String,
    pub source: Source,
    pub category: Option<TaskCategory>,
    /// Instruction plus code, per the counter active at load time.
    pub token_count: usize,
    pub oversized: bool,
}

impl InstructionSample {
    /// Oversized samples stay in the corpus (and the retrieval index) but
    /// are excluded from training batches.
    pub fn trainable(&self) -> bool {
        !self.oversized
    }
}

/// Serialized form. Token counts are derived, so they are not stored.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<String>,
    instruction: String,
    code: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

impl From<&InstructionSample> for Record {
    fn from(s: &InstructionSample) -> Self {
        Record {
            id: Some(s.id.clone()),
            instruction: s.instruction.clone(),
            code: s.code.clone(),
            source: Some(s.source.as_str().to_string()),
            category: s.category.map(|c| c.as_str().to_string()),
        }
    }
}

/// A record that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIssue {
    /// 0-based position among records.
    pub record: usize,
    /// 1-based line number (jsonl only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub reason: String,
}

#[derive(Clone)]
pub struct CorpusOptions {
    pub counter: Arc<dyn TokenCounter>,
    pub max_input_tokens: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            counter: Arc::new(WhitespaceCounter),
            max_input_tokens: MAX_INPUT_TOKENS,
        }
    }
}

impl fmt::Debug for CorpusOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CorpusOptions")
            .field("counter", &self.counter.name())
            .field("max_input_tokens", &self.max_input_tokens)
            .finish()
    }
}

impl CorpusOptions {
    fn measure(&self, instruction: &str, code: &str) -> (usize, bool) {
        let n = self.counter.count(instruction) + self.counter.count(code);
        (n, n > self.max_input_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub samples: Vec<InstructionSample>,
    pub rejected: Vec<RecordIssue>,
    pub tokenizer: String,
}

impl LoadedCorpus {
    pub fn stats(&self) -> CorpusStats {
        corpus_stats(&self.samples, &self.tokenizer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub by_source: BTreeMap<String, usize>,
    pub by_category: BTreeMap<String, usize>,
    pub oversized: usize,
    /// Counter that produced the token counts.
    pub tokenizer: String,
}

pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    opts: &CorpusOptions,
) -> Result<LoadedCorpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, format, opts).map_err(|reason| CorpusError::Format {
        path: path.to_path_buf(),
        format,
        reason,
    })
}

/// Parses an in-memory document. Only a document-level syntax error (a
/// json-array that is not an array) fails outright.
pub fn parse_corpus(
    text: &str,
    format: CorpusFormat,
    opts: &CorpusOptions,
) -> Result<LoadedCorpus, String> {
    let raw: Vec<(Option<usize>, Result<serde_json::Value, String>)> = match format {
        CorpusFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.push((
                    Some(i + 1),
                    serde_json::from_str(line).map_err(|e| e.to_string()),
                ));
            }
            out
        }
        CorpusFormat::JsonArray => {
            if text.trim().is_empty() {
                Vec::new()
            } else {
                let values: Vec<serde_json::Value> =
                    serde_json::from_str(text).map_err(|e| e.to_string())?;
                values.into_iter().map(|v| (None, Ok(v))).collect()
            }
        }
    };

    let mut samples = Vec::with_capacity(raw.len());
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (record, (line, value)) in raw.into_iter().enumerate() {
        let reject = |reason: String| RecordIssue {
            record,
            line,
            reason,
        };
        let parsed: Record = match value.map(serde_json::from_value) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => {
                rejected.push(reject(e.to_string()));
                continue;
            }
            Err(e) => {
                rejected.push(reject(format!("invalid JSON: {e}")));
                continue;
            }
        };
        match validate(parsed, record, opts) {
            Ok(sample) if !seen.insert(sample.id.clone()) => {
                rejected.push(reject(format!("duplicate id `{}`", sample.id)));
            }
            Ok(sample) => samples.push(sample),
            Err(reason) => rejected.push(reject(reason)),
        }
    }
    Ok(LoadedCorpus {
        samples,
        rejected,
        tokenizer: opts.counter.name().to_string(),
    })
}

fn validate(r: Record, index: usize, opts: &CorpusOptions) -> Result<InstructionSample, String> {
    if r.instruction.trim().is_empty() {
        return Err("instruction is blank".into());
    }
    if r.code.trim().is_empty() {
        return Err("code is blank".into());
    }
    let id = match r.id {
        Some(id) if id.trim().is_empty() => return Err("id is blank".into()),
        Some(id) => id,
        None => format!("sample-{index:05}"),
    };
    let source = match r.source.as_deref() {
        None => Source::Other,
        Some(s) => serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown source `{s}`"))?,
    };
    let category = match r.category.as_deref() {
        None | Some("uncategorized") | Some("") => None,
        Some(c) => Some(c.parse::<TaskCategory>().map_err(|e| e.to_string())?),
    };
    let (token_count, oversized) = opts.measure(&r.instruction, &r.code);
    Ok(InstructionSample {
        id,
        instruction: r.instruction,
        code: r.code,
        source,
        category,
        token_count,
        oversized,
    })
}

pub fn corpus_stats(samples: &[InstructionSample], tokenizer: &str) -> CorpusStats {
    let mut by_source = BTreeMap::new();
    let mut by_category = BTreeMap::new();
    for s in samples {
        *by_source.entry(s.source.as_str().to_string()).or_insert(0) += 1;
        let cat = s.category.map_or("uncategorized", |c| c.as_str());
        *by_category.entry(cat.to_string()).or_insert(0) += 1;
    }
    CorpusStats {
        total: samples.len(),
        by_source,
        by_category,
        oversized: samples.iter().filter(|s| s.oversized).count(),
        tokenizer: tokenizer.to_string(),
    }
}

pub fn serialize_corpus(samples: &[InstructionSample], format: CorpusFormat) -> String {
    let records: Vec<Record> = samples.iter().map(Record::from).collect();
    match format {
        CorpusFormat::Jsonl => records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect(),
        CorpusFormat::JsonArray => {
            serde_json::to_string_pretty(&records).expect("records serialize") + "\n"
        }
    }
}

pub fn save_corpus(
    path: &Path,
    samples: &[InstructionSample],
    format: CorpusFormat,
) -> Result<(), CorpusError> {
    fs::write(path, serialize_corpus(samples, format)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Keeps the first `max_tokens` whitespace tokens of `text`.
pub fn truncate_tail(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn augmentation_prompt(code: &str) -> String {
    format!(
        "Write a single clear instruction describing the task solved by the following PennyLane code.\n\
         Reply with the instruction only.\n\n{code}\n"
    )
}

/// Returns a copy of `sample` whose instruction was regenerated by the
/// backend. The code field is never touched.
pub fn augment_instruction(
    sample: &InstructionSample,
    backend: &dyn GenerationBackend,
    params: &DecodingParams,
    opts: &CorpusOptions,
) -> Result<InstructionSample, AugmentError> {
    let req = GenerationRequest::new(augmentation_prompt(&sample.code), *params, 1);
    let out = backend::generate(&req, backend).map_err(|source| AugmentError::Backend {
        id: sample.id.clone(),
        source,
    })?;
    let instruction = out.completions[0].text.trim().to_string();
    if instruction.is_empty() {
        return Err(AugmentError::EmptyOutput {
            id: sample.id.clone(),
        });
    }
    let (token_count, oversized) = opts.measure(&instruction, &sample.code);
    Ok(InstructionSample {
        instruction,
        token_count,
        oversized,
        ..sample.clone()
    })
}

/// Augments every sample on a pool of at most `workers` threads. Output
/// order matches input order; sample `i` uses seed `derive_seed(seed, i)`.
pub fn augment_batch(
    samples: &[InstructionSample],
    backend: &dyn GenerationBackend,
    params: &DecodingParams,
    opts: &CorpusOptions,
    workers: usize,
) -> Vec<Result<InstructionSample, AugmentError>> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let p = params.with_seed(backend::derive_seed(params.seed, i as u64));
                augment_instruction(s, backend, &p, opts)
            })
            .collect()
    })
}

//! `qcoder`: corpus tooling, toy fine-tuning, retrieval and benchmark runs.
//!
//! Exit codes: 0 success, 1 task-level failures (e.g. rejected corpus
//! records), 2 usage or input errors, 3 infrastructure failures.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qcoder_core::backend::{ENV_ENDPOINT, ENV_MODEL};
use qcoder_core::corpus::{CorpusFormat, MAX_INPUT_TOKENS};
use qcoder_core::harness::{CellSpec, ReportFormat};
use qcoder_core::tinyformer::{Precision, Target};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infrastructure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Infrastructure(_) => 3,
        }
    }
}

/// What a successful command reports back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    TaskFailures,
}

#[derive(Debug, Parser)]
#[command(
    name = "qcoder",
    version,
    about = "Quantum code generation toolkit",
    propagate_version = true
)]
struct Cli {
    /// Flat TOML file of default flag values (flags > config > env > defaults).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
enum Command {
    /// Validate a corpus, report statistics and optionally rewrite or augment it.
    Ingest(IngestArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Embed a corpus and persist a retrieval index.
    Index(IndexArgs),
    /// Show the nearest corpus samples for a query.
    Query(QueryArgs),
    /// Fine-tune LoRA adapters on the micro-transformer.
    TrainToy(TrainToyArgs),
    /// Generate completions for one prompt.
    Ask(AskArgs),
    /// Run the benchmark at one decoding setting.
    Eval(EvalArgs),
    /// Run the benchmark over a temperature x top-p grid.
    Grid(GridArgs),
    /// Render a finished run, or compare tallies, without touching run data.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Stats(_) => "stats",
            Command::Index(_) => "index",
            Command::Query(_) => "query",
            Command::TrainToy(_) => "train-toy",
            Command::Ask(_) => "ask",
            Command::Eval(_) => "eval",
            Command::Grid(_) => "grid",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Toy,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Args, Serialize)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Mock, env = "QCODER_BACKEND")]
    pub backend: BackendKind,
    /// Checkpoint directory for the toy backend.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Remote generation endpoint.
    #[arg(long, env = ENV_ENDPOINT)]
    pub endpoint: Option<String>,
    /// Model name sent to the remote endpoint.
    #[arg(long, env = ENV_MODEL)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub request_timeout: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: CorpusFormat,
    /// Write statistics and rejected records here as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the accepted (and possibly augmented) samples here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    pub out_format: CorpusFormat,
    #[arg(long, default_value_t = MAX_INPUT_TOKENS)]
    pub max_input_tokens: usize,
    /// Regenerate every instruction with the backend (requires --out).
    #[arg(long, requires = "out")]
    pub augment: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    pub top_p: f64,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0, env = "QCODER_SEED")]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: CorpusFormat,
    #[arg(long, default_value_t = MAX_INPUT_TOKENS)]
    pub max_input_tokens: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: CorpusFormat,
    /// New directory for the index.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hash)]
    pub embedder: EmbedderKind,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub text: String,
    /// Print hits as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainToyArgs {
    /// New directory for the checkpoint and training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Instruction/code corpus; the built-in synthetic pairs when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    pub format: CorpusFormat,
    #[arg(long, default_value_t = 1, env = "QCODER_SEED")]
    pub seed: u64,
    /// Optimizer updates.
    #[arg(long, default_value_t = 200)]
    pub updates: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 4.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub dropout: f64,
    #[arg(long, value_delimiter = ',', default_value = "query,value")]
    pub targets: Vec<Target>,
    #[arg(long, default_value_t = 4)]
    pub micro_batch: usize,
    #[arg(long, default_value_t = 4)]
    pub grad_accum: usize,
    #[arg(long, default_value = "fp32")]
    pub precision: Precision,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AskArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, conflicts_with = "prompt")]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Task file whose canonical solutions drive the mock backend.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Prepend retrieved examples from --index.
    #[arg(long, requires = "index")]
    pub rag: bool,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = MAX_INPUT_TOKENS)]
    pub context_budget: usize,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    pub top_p: f64,
    #[arg(long, default_value_t = 512)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0, env = "QCODER_SEED")]
    pub seed: u64,
    /// Also write the request and completions to this new directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SandboxArgs {
    #[arg(long, default_value = "python3", env = "QCODER_PYTHON")]
    pub python: String,
    /// Address-space limit for each candidate process, in MiB.
    #[arg(long)]
    pub memory_mb: Option<u64>,
    /// Overrides every task's timeout, in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub sandbox: SandboxArgs,
    /// Run directory; rerunning into it resumes.
    #[arg(long)]
    pub out: PathBuf,
    /// Completions per task.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Pass@k values to report.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub k: Vec<usize>,
    /// Count a task as solved when one of its first k completions passes
    /// (default: any of the n).
    #[arg(long)]
    pub success_k: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0, env = "QCODER_SEED")]
    pub seed: u64,
    #[arg(long, env = "QCODER_WORKERS")]
    pub workers: Option<usize>,
    /// Prepend retrieved examples from --index to every task prompt.
    #[arg(long, requires = "index")]
    pub rag: bool,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub rag_k: usize,
    #[arg(long, default_value_t = MAX_INPUT_TOKENS)]
    pub context_budget: usize,
    /// Stop (resumably) once this many tasks have finished.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    pub top_p: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub top_ps: Vec<f64>,
    /// Explicit cells as T:top_p, replacing the product grid.
    #[arg(long, value_delimiter = ',')]
    pub cells: Vec<CellSpec>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Run directory written by `eval` or `grid`.
    #[arg(long, required_unless_present = "counts")]
    pub run: Option<PathBuf>,
    #[arg(long, default_value = "text-table")]
    pub format: ReportFormat,
    /// Compare columns given as NAME=SUCCESS/FAILED.
    #[arg(long, conflicts_with = "run")]
    pub counts: Vec<String>,
}

/// Everything a command needs to write its manifest.
pub struct Invocation {
    pub argv: Vec<String>,
    pub config_file: Option<PathBuf>,
    pub settings: std::collections::BTreeMap<String, manifest::Setting>,
}

fn settings(
    args: &serde_json::Value,
    matches: &ArgMatches,
    from_file: &std::collections::BTreeSet<String>,
) -> std::collections::BTreeMap<String, manifest::Setting> {
    let mut out = std::collections::BTreeMap::new();
    let mut flat = serde_json::Map::new();
    flatten_into(args, &mut flat);
    for (name, value) in flat {
        let source = if from_file.contains(&name) {
            "config"
        } else {
            match matches.value_source(&name) {
                Some(ValueSource::CommandLine) => "flag",
                Some(ValueSource::EnvVariable) => "env",
                Some(ValueSource::DefaultValue) => "default",
                _ => "unset",
            }
        };
        out.insert(
            name.clone(),
            manifest::Setting {
                value: manifest::redact(&name, value),
                source: source.to_string(),
            },
        );
    }
    out
}

/// Lifts the fields of nested (flattened) argument groups to the top.
fn flatten_into(v: &serde_json::Value, out: &mut serde_json::Map<String, serde_json::Value>) {
    if let serde_json::Value::Object(map) = v {
        for (k, v) in map {
            if v.is_object() {
                flatten_into(v, out);
            } else {
                out.insert(k.clone(), v.clone());
            }
        }
    }
}

fn run(argv: Vec<String>) -> Result<Outcome, CliError> {
    let cmd = Cli::command();
    let injected = config::inject(&cmd, argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let matches = match cmd.try_get_matches_from(&injected.argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return Ok(Outcome::Ok);
            }
            return Err(CliError::Usage(String::new()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let args_json = serde_json::to_value(&cli.command).expect("serializable");
    let inv = Invocation {
        argv: injected.argv.clone(),
        config_file: injected.path.clone(),
        settings: settings(&args_json, sub, &injected.from_file),
    };
    let name = cli.command.name();
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Index(a) => commands::index(&a, name, &inv),
        Command::Query(a) => commands::query(&a),
        Command::TrainToy(a) => commands::train_toy(&a, name, &inv),
        Command::Ask(a) => commands::ask(&a, name, &inv),
        Command::Eval(a) => commands::eval(&a, name, &inv),
        Command::Grid(a) => commands::grid(&a, name, &inv),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::TaskFailures) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.code())
        }
    }
}

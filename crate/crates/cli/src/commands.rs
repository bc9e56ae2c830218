use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use qcoder_core::backend::{
    BackendError, GenerationBackend, GenerationRequest, GenerationResult, MockBackend,
    RemoteBackend, RemoteConfig, RetryPolicy, ToyBackend, ENV_API_KEY, ENV_ENDPOINT,
};
use qcoder_core::corpus::{
    augment_batch, corpus_stats, load_corpus, save_corpus, CorpusError, CorpusOptions,
    InstructionSample, LoadedCorpus,
};
use qcoder_core::decode::DecodingParams;
use qcoder_core::harness::{
    canonical_mock, emit_comparison, emit_report, evaluate, grid_run, load_tasks, product_grid,
    tasks_hash, BenchmarkTask, CellSpec, EvalReport, HarnessError, PythonSandbox, ReportFormat,
    RunOptions, SandboxConfig, SuccessRule, Tally,
};
use qcoder_core::retrieval::{
    assemble_context, build_index, load_index, query_top_k, save_index, AssembledPrompt, Embedder,
    HashingEmbedder, HttpEmbedder, Index, RetrievalError,
};
use qcoder_core::tinyformer::{
    exact_recall, load_checkpoint, merge_adapters, save_checkpoint, toy_pairs,
    train_toy as fit_toy, LoraConfig, TinyformerError, ToyRecipe,
};
use qcoder_core::{TokenCounter, WhitespaceCounter};

use crate::manifest::{self, RunManifest, RunState};
use crate::{
    AskArgs, BackendArgs, BackendKind, CliError, EmbedderKind, EvalArgs, GridArgs, IndexArgs,
    IngestArgs, Invocation, Outcome, QueryArgs, ReportArgs, RunArgs, StatsArgs, TrainToyArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn infra(e: impl ToString) -> CliError {
    CliError::Infrastructure(e.to_string())
}

fn from_corpus(e: CorpusError) -> CliError {
    usage(e)
}

fn from_harness(e: HarnessError) -> CliError {
    if e.is_infrastructure() {
        infra(e)
    } else {
        usage(e)
    }
}

/// A task file that cannot be read is a bad argument, not a broken machine.
fn from_task_file(e: HarnessError) -> CliError {
    match e {
        HarnessError::Io { .. } => usage(e),
        other => from_harness(other),
    }
}

fn from_retrieval(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::Embedder { .. } => infra(e),
        other => usage(other),
    }
}

fn from_tinyformer(e: TinyformerError) -> CliError {
    match e {
        TinyformerError::Io(_) | TinyformerError::Checkpoint(_) | TinyformerError::Config(_) => {
            usage(e)
        }
        other => infra(other),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| infra(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| infra(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn corpus_options(max_input_tokens: usize) -> CorpusOptions {
    CorpusOptions {
        max_input_tokens,
        ..CorpusOptions::default()
    }
}

fn workers(requested: Option<usize>) -> usize {
    requested
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Environment variables worth recording, with secrets redacted.
fn environment() -> BTreeMap<String, String> {
    [
        ENV_ENDPOINT,
        ENV_API_KEY,
        "QCODER_MODEL",
        "QCODER_BACKEND",
        "QCODER_SEED",
        "QCODER_PYTHON",
    ]
    .iter()
    .filter_map(|&k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
    .map(|(k, v)| {
        let v = manifest::redact(&k, v.into());
        (k, v.as_str().unwrap_or_default().to_string())
    })
    .collect()
}

fn new_manifest(
    command: &str,
    inv: &Invocation,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv: inv.argv.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_file: inv.config_file.clone(),
        settings: inv.settings.clone(),
        environment: environment(),
        seeds,
        inputs,
        started_at: manifest::now(),
        resumed_at: Vec::new(),
        ended_at: None,
        state: RunState::Running,
    }
}

/// Claims a directory for a one-shot command; refuses to reuse one that
/// already holds a run.
fn claim_fresh(dir: &Path, manifest: &RunManifest) -> Result<()> {
    if RunManifest::path(dir).exists() {
        return Err(usage(format!(
            "{} already holds a run; choose a new directory",
            dir.display()
        )));
    }
    manifest.write(dir).map_err(infra)
}

/// Opens a resumable run directory. Returns `None` in place of a manifest
/// when the directory holds a completed run (its manifest stays frozen).
fn claim_resumable(dir: &Path, fresh: RunManifest) -> Result<Option<RunManifest>> {
    match RunManifest::load(dir).map_err(usage)? {
        Some(m) if m.state == RunState::Complete => Ok(None),
        Some(mut m) => {
            if m.command != fresh.command || m.inputs != fresh.inputs || m.seeds != fresh.seeds {
                return Err(usage(format!(
                    "{} holds a different run (command, inputs or seeds differ)",
                    dir.display()
                )));
            }
            m.resumed_at.push(manifest::now());
            m.state = RunState::Running;
            m.ended_at = None;
            m.write(dir).map_err(infra)?;
            Ok(Some(m))
        }
        None => {
            fresh.write(dir).map_err(infra)?;
            Ok(Some(fresh))
        }
    }
}

fn finish(dir: &Path, manifest: Option<&mut RunManifest>, state: RunState) -> Result<()> {
    match manifest {
        Some(m) => m.finish(dir, state).map_err(infra),
        None => Ok(()),
    }
}

/// Backend for prompts that match no task: returns a placeholder.
fn echo_mock() -> MockBackend {
    MockBackend::from_fn(|_, _, _| {
        Some("```python\n# no scripted answer for this prompt\n```".to_string())
    })
    .with_id("mock:echo")
}

fn build_backend(
    args: &BackendArgs,
    tasks: Option<&[BenchmarkTask]>,
) -> Result<Box<dyn GenerationBackend>> {
    match args.backend {
        BackendKind::Mock => Ok(match tasks {
            Some(t) => Box::new(canonical_mock(t)),
            None => Box::new(echo_mock()),
        }),
        BackendKind::Toy => {
            let dir = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| usage("--backend toy needs --checkpoint"))?;
            let (model, tok) = load_checkpoint(dir).map_err(from_tinyformer)?;
            let merged = merge_adapters(&model).map_err(from_tinyformer)?;
            Ok(Box::new(ToyBackend::new(merged, tok)))
        }
        BackendKind::Remote => {
            let endpoint = args.endpoint.clone().ok_or_else(|| {
                usage(format!(
                    "--backend remote needs --endpoint or {ENV_ENDPOINT}"
                ))
            })?;
            if !(args.request_timeout > 0.0) {
                return Err(usage("--request-timeout must be positive"));
            }
            let config = RemoteConfig {
                endpoint,
                api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
                model: args.model.clone(),
                retry: RetryPolicy {
                    max_attempts: args.max_attempts.max(1),
                    request_timeout: Duration::from_secs_f64(args.request_timeout),
                    ..RetryPolicy::default()
                },
            };
            Ok(Box::new(RemoteBackend::new(config)))
        }
    }
}

fn embedder_for_id(id: &str) -> Result<Box<dyn Embedder>> {
    if let Some(dim) = id.strip_prefix("hash-") {
        let dim = dim
            .parse()
            .map_err(|_| usage(format!("bad embedder id `{id}`")))?;
        return Ok(Box::new(HashingEmbedder::new(dim)));
    }
    if let Some(rest) = id.strip_prefix("http-") {
        let dim = rest.split(':').next().and_then(|d| d.parse().ok());
        let dim = dim.ok_or_else(|| usage(format!("bad embedder id `{id}`")))?;
        return Ok(Box::new(
            HttpEmbedder::from_env(dim).map_err(from_retrieval)?,
        ));
    }
    Err(usage(format!("unknown embedder `{id}`")))
}

/// Prepends retrieved examples to every prompt before delegating.
struct RagBackend {
    inner: Box<dyn GenerationBackend>,
    index: Index,
    embedder: Box<dyn Embedder>,
    k: usize,
    budget: usize,
}

impl RagBackend {
    fn open(
        inner: Box<dyn GenerationBackend>,
        dir: &Path,
        k: usize,
        budget: usize,
    ) -> Result<Self> {
        let index = load_index(dir).map_err(from_retrieval)?;
        let embedder = embedder_for_id(index.embedder_id())?;
        Ok(Self {
            inner,
            index,
            embedder,
            k,
            budget,
        })
    }

    fn assemble(&self, prompt: &str) -> std::result::Result<AssembledPrompt, RetrievalError> {
        let hits = query_top_k(&self.index, prompt, self.k, self.embedder.as_ref())?;
        let counter: &dyn TokenCounter = &WhitespaceCounter;
        assemble_context(&hits, self.index.samples(), prompt, self.budget, counter)
    }

    fn augment(&self, prompt: &str) -> std::result::Result<String, RetrievalError> {
        Ok(self.assemble(prompt)?.text)
    }
}

impl GenerationBackend for RagBackend {
    fn id(&self) -> String {
        format!(
            "rag(k={},{})+{}",
            self.k,
            self.index.embedder_id(),
            self.inner.id()
        )
    }

    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResult, BackendError> {
        let prompt = self
            .augment(&req.prompt)
            .map_err(|e| BackendError::Failed {
                backend: self.id(),
                message: e.to_string(),
            })?;
        self.inner.generate(&GenerationRequest {
            prompt,
            ..req.clone()
        })
    }
}

fn print_rejects(corpus: &LoadedCorpus) {
    for issue in &corpus.rejected {
        match issue.line {
            Some(line) => eprintln!(
                "rejected record {} (line {line}): {}",
                issue.record, issue.reason
            ),
            None => eprintln!("rejected record {}: {}", issue.record, issue.reason),
        }
    }
}

pub fn ingest(a: &IngestArgs) -> Result<Outcome> {
    let opts = corpus_options(a.max_input_tokens);
    let corpus = load_corpus(&a.input, a.format, &opts).map_err(from_corpus)?;
    print_rejects(&corpus);
    let mut samples = corpus.samples.clone();
    let mut augment_failures = Vec::new();
    if a.augment {
        let backend = build_backend(&a.backend, None)?;
        let params = DecodingParams {
            temperature: a.temperature,
            top_p: a.top_p,
            max_new_tokens: a.max_new_tokens,
            seed: a.seed,
        };
        params.validate().map_err(usage)?;
        let results = augment_batch(
            &samples,
            backend.as_ref(),
            &params,
            &opts,
            workers(a.workers),
        );
        samples = Vec::with_capacity(results.len());
        for (orig, r) in corpus.samples.iter().zip(results) {
            match r {
                Ok(s) => samples.push(s),
                Err(e) => {
                    eprintln!("augmentation failed: {e}");
                    augment_failures.push(json!({"id": orig.id, "reason": e.to_string()}));
                    samples.push(orig.clone());
                }
            }
        }
    }
    let stats = corpus_stats(&samples, &corpus.tokenizer);
    if let Some(out) = &a.out {
        save_corpus(out, &samples, a.out_format).map_err(from_corpus)?;
    }
    let report = json!({
        "input": a.input,
        "input_sha256": file_sha256(&a.input)?,
        "stats": stats,
        "rejected": corpus.rejected,
        "augment_failures": augment_failures,
    });
    match &a.report {
        Some(path) => write_file(path, to_json(&report))?,
        None => print!("{}", to_json(&report)),
    }
    println!(
        "{} accepted, {} rejected, {} oversized (> {} tokens)",
        stats.total,
        corpus.rejected.len(),
        stats.oversized,
        a.max_input_tokens
    );
    if corpus.rejected.is_empty() && augment_failures.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::TaskFailures)
    }
}

pub fn stats(a: &StatsArgs) -> Result<Outcome> {
    let corpus = load_corpus(&a.corpus, a.format, &corpus_options(a.max_input_tokens))
        .map_err(from_corpus)?;
    print_rejects(&corpus);
    print!("{}", to_json(&corpus.stats()));
    Ok(Outcome::Ok)
}

pub fn index(a: &IndexArgs, command: &str, inv: &Invocation) -> Result<Outcome> {
    let corpus =
        load_corpus(&a.corpus, a.format, &CorpusOptions::default()).map_err(from_corpus)?;
    print_rejects(&corpus);
    let embedder: Box<dyn Embedder> = match a.embedder {
        EmbedderKind::Hash => Box::new(HashingEmbedder::new(a.dim)),
        EmbedderKind::Http => Box::new(HttpEmbedder::from_env(a.dim).map_err(from_retrieval)?),
    };
    let inputs = BTreeMap::from([("corpus".to_string(), file_sha256(&a.corpus)?)]);
    let mut m = new_manifest(command, inv, BTreeMap::new(), inputs);
    claim_fresh(&a.out, &m)?;
    let built = build_index(&corpus.samples, embedder.as_ref()).map_err(from_retrieval);
    let result = built.and_then(|index| {
        save_index(&index, &a.out)
            .map(|_| index)
            .map_err(from_retrieval)
    });
    match result {
        Ok(index) => {
            m.finish(&a.out, RunState::Complete).map_err(infra)?;
            println!(
                "indexed {} samples with {} into {}",
                index.len(),
                index.embedder_id(),
                a.out.display()
            );
            Ok(Outcome::Ok)
        }
        Err(e) => {
            m.finish(&a.out, RunState::Failed).map_err(infra)?;
            Err(e)
        }
    }
}

pub fn query(a: &QueryArgs) -> Result<Outcome> {
    let index = load_index(&a.index).map_err(from_retrieval)?;
    let embedder = embedder_for_id(index.embedder_id())?;
    let hits = query_top_k(&index, &a.text, a.k, embedder.as_ref()).map_err(from_retrieval)?;
    if a.json {
        print!("{}", to_json(&hits));
        return Ok(Outcome::Ok);
    }
    for h in &hits {
        let instruction = index
            .sample(&h.sample_id)
            .map_or("", |s| s.instruction.as_str());
        println!(
            "{:>2}  {:.4}  {}  {}",
            h.rank,
            h.score,
            h.sample_id,
            instruction.lines().next().unwrap_or("")
        );
    }
    Ok(Outcome::Ok)
}

pub fn train_toy(a: &TrainToyArgs, command: &str, inv: &Invocation) -> Result<Outcome> {
    let mut inputs = BTreeMap::new();
    let pairs: Vec<(String, String)> = match &a.corpus {
        Some(path) => {
            let corpus =
                load_corpus(path, a.format, &CorpusOptions::default()).map_err(from_corpus)?;
            print_rejects(&corpus);
            inputs.insert("corpus".to_string(), file_sha256(path)?);
            corpus
                .samples
                .iter()
                .filter(|s| s.trainable())
                .map(|s: &InstructionSample| (s.instruction.clone(), s.code.clone()))
                .collect()
        }
        None => {
            inputs.insert("corpus".to_string(), "builtin:toy-pairs".to_string());
            toy_pairs()
        }
    };
    if pairs.is_empty() {
        return Err(usage("no trainable samples"));
    }
    let defaults = ToyRecipe::default();
    let recipe = ToyRecipe {
        model_seed: a.seed,
        d_model: a.d_model,
        lora: LoraConfig {
            rank: a.rank,
            dropout: a.dropout,
            targets: a.targets.clone(),
            scale: a.scale,
            seed: a.seed,
        },
        train: qcoder_core::tinyformer::TrainConfig {
            learning_rate: a.lr,
            micro_batch: a.micro_batch,
            grad_accum_steps: a.grad_accum,
            precision: a.precision,
            seed: a.seed,
            ..defaults.train
        },
        max_updates: a.updates,
    };
    let seeds = BTreeMap::from([
        ("model".to_string(), a.seed),
        ("lora".to_string(), a.seed),
        ("train".to_string(), a.seed),
    ]);
    let mut m = new_manifest(command, inv, seeds, inputs);
    claim_fresh(&a.out, &m)?;
    let run = (|| {
        let run = fit_toy(&pairs, &recipe).map_err(from_tinyformer)?;
        save_checkpoint(&a.out, &run.model, &run.tokenizer).map_err(from_tinyformer)?;
        let merged = merge_adapters(&run.model).map_err(from_tinyformer)?;
        let recall = exact_recall(&merged, &run.tokenizer, &pairs).map_err(from_tinyformer)?;
        Ok::<_, CliError>((run, recall))
    })();
    let (run, recall) = match run {
        Ok(v) => v,
        Err(e) => {
            m.finish(&a.out, RunState::Failed).map_err(infra)?;
            return Err(e);
        }
    };
    let mut log = String::new();
    for (i, loss) in run.report.loss_trace.iter().enumerate() {
        log.push_str(
            &serde_json::to_string(&json!({"update": i + 1, "loss": loss})).expect("json"),
        );
        log.push('\n');
    }
    write_file(&a.out.join("train_log.jsonl"), log)?;
    let final_loss = run
        .report
        .loss_trace
        .last()
        .copied()
        .unwrap_or(run.initial_loss);
    let summary = json!({
        "recipe": recipe,
        "samples": pairs.len(),
        "updates": run.report.updates,
        "initial_loss": run.initial_loss,
        "final_loss": final_loss,
        "exact_recall": recall,
    });
    write_file(&a.out.join("summary.json"), to_json(&summary))?;
    m.finish(&a.out, RunState::Complete).map_err(infra)?;
    println!(
        "{} updates: loss {:.4} -> {:.4}; exact recall {recall}/{}",
        run.report.updates,
        run.initial_loss,
        final_loss,
        pairs.len()
    );
    println!("checkpoint written to {}", a.out.display());
    Ok(Outcome::Ok)
}

pub fn ask(a: &AskArgs, command: &str, inv: &Invocation) -> Result<Outcome> {
    let prompt = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(path)) => {
            fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(usage("give --prompt or --prompt-file")),
    };
    let tasks = match &a.tasks {
        Some(path) => Some(load_tasks(path).map_err(from_task_file)?),
        None => None,
    };
    let mut backend = build_backend(&a.backend, tasks.as_deref())?;
    // Retrieval happens here rather than inside the backend so the exact
    // prompt sent to the model ends up in request.json.
    let mut context = None;
    let prompt = if a.rag {
        let dir = a.index.as_ref().expect("clap enforces --index");
        let rag = RagBackend::open(backend, dir, a.k, a.context_budget)?;
        let assembled = rag.assemble(&prompt).map_err(from_retrieval)?;
        backend = rag.inner;
        let text = assembled.text.clone();
        context = Some(assembled);
        text
    } else {
        prompt
    };
    let params = DecodingParams {
        temperature: a.temperature,
        top_p: a.top_p,
        max_new_tokens: a.max_new_tokens,
        seed: a.seed,
    };
    let req = GenerationRequest::new(prompt, params, a.n);
    req.validate().map_err(usage)?;
    let mut m = None;
    if let Some(out) = &a.out {
        let seeds = BTreeMap::from([("seed".to_string(), a.seed)]);
        let manifest = new_manifest(command, inv, seeds, BTreeMap::new());
        claim_fresh(out, &manifest)?;
        m = Some(manifest);
    }
    let result = qcoder_core::backend::generate(&req, backend.as_ref());
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            if let Some(out) = &a.out {
                finish(out, m.as_mut(), RunState::Failed)?;
            }
            return Err(infra(e));
        }
    };
    for (i, c) in result.completions.iter().enumerate() {
        println!("--- completion {} ---", i + 1);
        match &c.error {
            Some(err) => println!("(missing: {err})"),
            None => println!("{}", c.text),
        }
    }
    if let Some(out) = &a.out {
        write_file(&out.join("request.json"), to_json(&req))?;
        write_file(&out.join("completions.json"), to_json(&result))?;
        if let Some(ctx) = &context {
            write_file(&out.join("context.json"), to_json(ctx))?;
        }
        finish(out, m.as_mut(), RunState::Complete)?;
    }
    Ok(Outcome::Ok)
}

struct Prepared {
    tasks: Vec<BenchmarkTask>,
    backend: Box<dyn GenerationBackend>,
    executor: PythonSandbox,
    opts: RunOptions,
    manifest: Option<RunManifest>,
}

fn prepare(r: &RunArgs, command: &str, inv: &Invocation) -> Result<Prepared> {
    let tasks = load_tasks(&r.tasks).map_err(from_task_file)?;
    let mut backend = build_backend(&r.backend, Some(&tasks))?;
    if r.rag {
        let dir = r.index.as_ref().expect("clap enforces --index");
        backend = Box::new(RagBackend::open(backend, dir, r.rag_k, r.context_budget)?);
    }
    let executor = PythonSandbox::new(SandboxConfig {
        python: r.sandbox.python.clone(),
        memory_limit_mb: r.sandbox.memory_mb,
        timeout_override: r.sandbox.timeout,
        ..SandboxConfig::default()
    });
    let opts = RunOptions {
        n: r.n,
        ks: r.k.clone(),
        rule: SuccessRule { k: r.success_k },
        max_new_tokens: r.max_new_tokens,
        seed: r.seed,
        workers: workers(r.workers),
    };
    let seeds = BTreeMap::from([("seed".to_string(), r.seed)]);
    let inputs = BTreeMap::from([
        ("tasks".to_string(), tasks_hash(&tasks)),
        ("backend".to_string(), backend.id()),
    ]);
    let manifest = claim_resumable(&r.out, new_manifest(command, inv, seeds, inputs))?;
    Ok(Prepared {
        tasks,
        backend,
        executor,
        opts,
        manifest,
    })
}

fn stopper(limit: Option<usize>) -> impl Fn(&qcoder_core::harness::Progress) -> bool {
    move |p| limit.is_some_and(|n| p.completed_total >= n)
}

fn emit_all(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(
        &dir.join("report.txt"),
        emit_report(report, ReportFormat::TextTable),
    )?;
    write_file(
        &dir.join("report.csv"),
        emit_report(report, ReportFormat::Csv),
    )
}

fn conclude<T>(
    out: &Path,
    manifest: Option<&mut RunManifest>,
    result: std::result::Result<T, HarnessError>,
) -> Result<T> {
    match result {
        Ok(v) => Ok(v),
        Err(e) => {
            let state = if matches!(e, HarnessError::Interrupted { .. }) {
                RunState::Interrupted
            } else {
                RunState::Failed
            };
            finish(out, manifest, state)?;
            Err(from_harness(e))
        }
    }
}

pub fn eval(a: &EvalArgs, command: &str, inv: &Invocation) -> Result<Outcome> {
    let r = &a.run;
    let mut p = prepare(r, command, inv)?;
    let cell = CellSpec {
        temperature: a.temperature,
        top_p: a.top_p,
    };
    let result = evaluate(
        &p.tasks,
        p.backend.as_ref(),
        &p.executor,
        cell,
        &p.opts,
        &r.out,
        &stopper(r.stop_after),
    );
    let (_, report) = conclude(&r.out, p.manifest.as_mut(), result)?;
    emit_all(&r.out, &report)?;
    finish(&r.out, p.manifest.as_mut(), RunState::Complete)?;
    print!("{}", emit_report(&report, ReportFormat::TextTable));
    Ok(Outcome::Ok)
}

pub fn grid(a: &GridArgs, command: &str, inv: &Invocation) -> Result<Outcome> {
    let r = &a.run;
    let cells = if a.cells.is_empty() {
        product_grid(&a.temperatures, &a.top_ps)
    } else {
        a.cells.clone()
    };
    let mut p = prepare(r, command, inv)?;
    let result = grid_run(
        &p.tasks,
        p.backend.as_ref(),
        &p.executor,
        &cells,
        &p.opts,
        &r.out,
        &stopper(r.stop_after),
    );
    let outcome = conclude(&r.out, p.manifest.as_mut(), result)?;
    emit_all(&r.out, &outcome.combined)?;
    finish(&r.out, p.manifest.as_mut(), RunState::Complete)?;
    print!(
        "{}",
        emit_report(&outcome.combined, ReportFormat::TextTable)
    );
    Ok(Outcome::Ok)
}

fn parse_counts(spec: &str) -> Result<(String, Tally)> {
    let bad = || usage(format!("expected NAME=SUCCESS/FAILED, got `{spec}`"));
    let (name, counts) = spec.rsplit_once('=').ok_or_else(bad)?;
    let (s, f) = counts.split_once('/').ok_or_else(bad)?;
    let s = s.trim().parse().map_err(|_| bad())?;
    let f = f.trim().parse().map_err(|_| bad())?;
    Ok((name.trim().to_string(), Tally::new(s, f)))
}

pub fn report(a: &ReportArgs) -> Result<Outcome> {
    if !a.counts.is_empty() {
        let columns = a
            .counts
            .iter()
            .map(|c| parse_counts(c))
            .collect::<Result<Vec<_>>>()?;
        print!("{}", emit_comparison(&columns, a.format));
        return Ok(Outcome::Ok);
    }
    let dir = a
        .run
        .as_ref()
        .expect("clap requires --run without --counts");
    let path = dir.join("report.json");
    let bytes = fs::read(&path).map_err(|e| {
        usage(format!(
            "{}: {e} (the run may be unfinished; rerun it to resume)",
            path.display()
        ))
    })?;
    let report: EvalReport =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    print!("{}", emit_report(&report, a.format));
    Ok(Outcome::Ok)
}

//! Resumable evaluation runs.
//!
//! A cell directory holds `cell.json` (parameters plus a `partial` or
//! `complete` marker), the append-only `results.jsonl` log with one record
//! per (task, completion), and `report.json` once the cell is complete.
//! Tasks are appended whole, in task order, so a rerun picks up exactly the
//! tasks that never finished. Seeds depend only on the base seed and the
//! task index, which makes an interrupted-and-resumed run produce the same
//! report as a straight one.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{aggregate, merge_cells, CellSpec, EvalReport, SuccessRule};
use super::{
    tasks_hash, BenchmarkTask, CompletionRecord, Executor, HarnessError, Status, TaskResult,
};
use crate::backend::{self, derive_seed, extract_code, GenerationBackend, GenerationRequest};
use crate::decode::DecodingParams;
use crate::TaskCategory;

/// Values swept for both temperature and top-p.
pub const DEFAULT_GRID: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Completions per task.
    pub n: usize,
    pub ks: Vec<usize>,
    pub rule: SuccessRule,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n: 5,
            ks: vec![1, 3, 5],
            rule: SuccessRule::default(),
            max_new_tokens: 512,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Progress {
    pub cell: String,
    pub cell_index: usize,
    pub completed_in_cell: usize,
    pub total_in_cell: usize,
    /// Tasks finished during this invocation, across cells.
    pub completed_total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub cells: Vec<(CellSpec, EvalReport)>,
    pub combined: EvalReport,
    pub results: Vec<Vec<TaskResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub task_id: String,
    pub category: TaskCategory,
    pub completion: usize,
    pub seed: u64,
    pub status: Status,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr_excerpt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
    pub code_sha256: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellState {
    temperature: f64,
    top_p: f64,
    n: usize,
    max_new_tokens: usize,
    seed: u64,
    backend: String,
    tasks_hash: String,
    total: usize,
    completed: usize,
    state: String,
}

impl CellState {
    fn same_run(&self, other: &CellState) -> bool {
        self.temperature == other.temperature
            && self.top_p == other.top_p
            && self.n == other.n
            && self.max_new_tokens == other.max_new_tokens
            && self.seed == other.seed
            && self.backend == other.backend
            && self.tasks_hash == other.tasks_hash
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("state serializes") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a run log, ignoring a torn final line.
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>, HarnessError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    Ok(text
        .split_inclusive('\n')
        .filter(|l| l.ends_with('\n'))
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

/// Drops an unterminated trailing line left by a crash mid-append.
fn trim_torn_tail(path: &Path) -> Result<(), HarnessError> {
    let Ok(bytes) = fs::read(path) else {
        return Ok(());
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
    }
    Ok(())
}

fn sha(code: &str) -> String {
    hex::encode(Sha256::digest(code.as_bytes()))
}

struct Cell<'a> {
    spec: CellSpec,
    index: usize,
    dir: PathBuf,
    tasks: &'a [BenchmarkTask],
    opts: &'a RunOptions,
}

impl Cell<'_> {
    fn params(&self, task_index: usize) -> DecodingParams {
        DecodingParams {
            temperature: self.spec.temperature,
            top_p: self.spec.top_p,
            max_new_tokens: self.opts.max_new_tokens,
            seed: derive_seed(self.opts.seed, task_index as u64),
        }
    }

    /// Generates and executes all completions for one task.
    fn run_task(
        &self,
        task_index: usize,
        backend: &dyn GenerationBackend,
        executor: &dyn Executor,
    ) -> Result<Vec<LogRecord>, HarnessError> {
        let task = &self.tasks[task_index];
        let params = self.params(task_index);
        let now = || chrono::Utc::now().to_rfc3339();
        let seed_of = |i: usize| derive_seed(params.seed, i as u64);
        let record =
            |i: usize, code: &str, status, duration_ms, stderr_excerpt, violations| LogRecord {
                task_id: task.id.clone(),
                category: task.category,
                completion: i,
                seed: seed_of(i),
                status,
                duration_ms,
                stderr_excerpt,
                violations,
                code_sha256: sha(code),
                finished_at: now(),
            };

        if let Some(dep) = executor.missing_requirement(task) {
            return Ok((0..self.opts.n)
                .map(|i| {
                    record(
                        i,
                        "",
                        Status::SkippedMissingDep,
                        0.0,
                        format!("missing dependency: {dep}"),
                        vec![],
                    )
                })
                .collect());
        }
        let req = GenerationRequest::new(task.prompt.clone(), params, self.opts.n);
        let generated =
            backend::generate(&req, backend).map_err(|source| HarnessError::Backend {
                task: task.id.clone(),
                source,
            })?;
        let mut cache: HashMap<String, super::ExecOutcome> = HashMap::new();
        let mut out = Vec::with_capacity(self.opts.n);
        for (i, completion) in generated.completions.iter().enumerate() {
            if let Some(err) = &completion.error {
                out.push(record(i, "", Status::Error, 0.0, err.clone(), vec![]));
                continue;
            }
            let code = extract_code(&completion.text);
            let outcome = match cache.get(&code) {
                Some(o) => o.clone(),
                None => {
                    let o = executor.execute(task, &code)?;
                    cache.insert(code.clone(), o.clone());
                    o
                }
            };
            out.push(record(
                i,
                &code,
                outcome.status,
                outcome.duration_ms,
                outcome.stderr_excerpt,
                outcome.violations,
            ));
        }
        Ok(out)
    }

    fn to_result(&self, task_index: usize, records: &[LogRecord]) -> TaskResult {
        let task = &self.tasks[task_index];
        let per_completion = records
            .iter()
            .map(|r| CompletionRecord {
                index: r.completion,
                seed: r.seed,
                status: r.status,
                duration_ms: r.duration_ms,
                stderr_excerpt: r.stderr_excerpt.clone(),
                violations: r.violations.clone(),
            })
            .collect();
        let mut result = TaskResult::new(
            task.id.clone(),
            task.category,
            per_completion,
            self.params(task_index),
        );
        result.identical_completions = records.len() > 1
            && records.iter().all(|r| {
                r.code_sha256 == records[0].code_sha256 && r.status != Status::SkippedMissingDep
            });
        result
    }

    /// Completed tasks recovered from an earlier invocation.
    fn recover(&self, log: &Path) -> Result<HashMap<usize, Vec<LogRecord>>, HarnessError> {
        let index_of: HashMap<&str, usize> = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.as_str(), i))
            .collect();
        let mut by_task: HashMap<usize, Vec<LogRecord>> = HashMap::new();
        for r in read_run_log(log)? {
            if let Some(&i) = index_of.get(r.task_id.as_str()) {
                by_task.entry(i).or_default().push(r);
            }
        }
        let n = self.opts.n;
        Ok(by_task
            .into_iter()
            .filter_map(|(i, recs)| {
                // A retried task appends a fresh full set; keep the latest.
                let tail = recs.get(recs.len().checked_sub(n)?..)?.to_vec();
                tail.iter()
                    .enumerate()
                    .all(|(j, r)| r.completion == j)
                    .then_some((i, tail))
            })
            .collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cell: &Cell<'_>,
    backend: &dyn GenerationBackend,
    executor: &dyn Executor,
    pool: &rayon::ThreadPool,
    completed_total: &mut usize,
    cancel: &dyn Fn(&Progress) -> bool,
) -> Result<(Vec<TaskResult>, EvalReport), HarnessError> {
    fs::create_dir_all(&cell.dir).map_err(io_err(&cell.dir))?;
    let state_path = cell.dir.join("cell.json");
    let log_path = cell.dir.join("results.jsonl");
    let total = cell.tasks.len();
    let mut state = CellState {
        temperature: cell.spec.temperature,
        top_p: cell.spec.top_p,
        n: cell.opts.n,
        max_new_tokens: cell.opts.max_new_tokens,
        seed: cell.opts.seed,
        backend: backend.id(),
        tasks_hash: tasks_hash(cell.tasks),
        total,
        completed: 0,
        state: "partial".into(),
    };
    if let Ok(text) = fs::read_to_string(&state_path) {
        let previous: CellState =
            serde_json::from_str(&text).map_err(|e| HarnessError::RunMismatch {
                path: state_path.clone(),
                reason: e.to_string(),
            })?;
        if !previous.same_run(&state) {
            return Err(HarnessError::RunMismatch {
                path: cell.dir.clone(),
                reason: "parameters, backend or task set differ".into(),
            });
        }
    }
    trim_torn_tail(&log_path)?;
    let mut done = cell.recover(&log_path)?;
    state.completed = done.len();
    write_json(&state_path, &state)?;

    let pending: Vec<usize> = (0..total).filter(|i| !done.contains_key(i)).collect();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    for chunk in pending.chunks(pool.current_num_threads().max(1)) {
        let batch: Vec<Result<Vec<LogRecord>, HarnessError>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&i| cell.run_task(i, backend, executor))
                .collect()
        });
        for (&i, records) in chunk.iter().zip(batch) {
            let records = records?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r).expect("log record serializes"));
                text.push('\n');
            }
            log.write_all(text.as_bytes()).map_err(io_err(&log_path))?;
            done.insert(i, records);
        }
        log.flush().map_err(io_err(&log_path))?;
        *completed_total += chunk.len();
        let progress = Progress {
            cell: cell.spec.label(),
            cell_index: cell.index,
            completed_in_cell: done.len(),
            total_in_cell: total,
            completed_total: *completed_total,
        };
        if done.len() < total && cancel(&progress) {
            state.completed = done.len();
            write_json(&state_path, &state)?;
            return Err(HarnessError::Interrupted {
                cell: cell.spec.label(),
                completed: done.len(),
                total,
            });
        }
    }

    let results: Vec<TaskResult> = (0..total).map(|i| cell.to_result(i, &done[&i])).collect();
    let report = aggregate(&results, cell.opts.rule, &cell.opts.ks)?;
    state.completed = total;
    state.state = "complete".into();
    write_json(&state_path, &state)?;
    write_json(&cell.dir.join("report.json"), &report)?;
    Ok((results, report))
}

fn validate(tasks: &[BenchmarkTask], opts: &RunOptions) -> Result<(), HarnessError> {
    if opts.n == 0 {
        return Err(HarnessError::Argument("n must be >= 1".into()));
    }
    if let Some(&k) = opts.ks.iter().find(|&&k| k == 0 || k > opts.n) {
        return Err(HarnessError::Argument(format!(
            "k = {k} must lie in 1..={}",
            opts.n
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(&t.id) {
            return Err(HarnessError::DuplicateTask(t.id.clone()));
        }
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Argument(format!("worker pool: {e}")))
}

/// Evaluates one decoding cell, persisting into `out`.
pub fn evaluate(
    tasks: &[BenchmarkTask],
    backend: &dyn GenerationBackend,
    executor: &dyn Executor,
    cell: CellSpec,
    opts: &RunOptions,
    out: &Path,
    cancel: &dyn Fn(&Progress) -> bool,
) -> Result<(Vec<TaskResult>, EvalReport), HarnessError> {
    validate(tasks, opts)?;
    let cell = Cell {
        spec: cell,
        index: 0,
        dir: out.to_path_buf(),
        tasks,
        opts,
    };
    run_cell(
        &cell,
        backend,
        executor,
        &pool(opts.workers)?,
        &mut 0,
        cancel,
    )
}

/// Evaluates every cell in order under `out/cells/<slug>/`, then writes the
/// pooled report to `out/report.json`.
pub fn grid_run(
    tasks: &[BenchmarkTask],
    backend: &dyn GenerationBackend,
    executor: &dyn Executor,
    grid: &[CellSpec],
    opts: &RunOptions,
    out: &Path,
    cancel: &dyn Fn(&Progress) -> bool,
) -> Result<GridOutcome, HarnessError> {
    validate(tasks, opts)?;
    if grid.is_empty() {
        return Err(HarnessError::Argument("grid is empty".into()));
    }
    let workers = pool(opts.workers)?;
    let mut completed_total = 0;
    let mut cells = Vec::with_capacity(grid.len());
    let mut results = Vec::with_capacity(grid.len());
    for (index, spec) in grid.iter().enumerate() {
        let cell = Cell {
            spec: *spec,
            index,
            dir: out.join("cells").join(spec.slug()),
            tasks,
            opts,
        };
        let (r, report) = run_cell(
            &cell,
            backend,
            executor,
            &workers,
            &mut completed_total,
            cancel,
        )?;
        cells.push((*spec, report));
        results.push(r);
    }
    let combined = merge_cells(&cells);
    write_json(&out.join("report.json"), &combined)?;
    Ok(GridOutcome {
        cells,
        combined,
        results,
    })
}

/// The full `{T} x {top_p}` product in row-major order.
pub fn product_grid(temperatures: &[f64], top_ps: &[f64]) -> Vec<CellSpec> {
    temperatures
        .iter()
        .flat_map(|&t| {
            top_ps.iter().map(move |&p| CellSpec {
                temperature: t,
                top_p: p,
            })
        })
        .collect()
}

//! Benchmark engine: task files, sandboxed execution, Pass@k, aggregation,
//! resumable grid runs and report emission.

mod mock;
mod passk;
mod report;
mod runner;
mod sandbox;
mod task;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::decode::DecodingParams;
use crate::TaskCategory;

pub use mock::{canonical_mock, corrupt};
pub use passk::pass_at_k;
pub use report::{
    aggregate, emit_comparison, emit_report, merge_cells, CellSpec, CellTally, EvalReport,
    ReportFormat, SuccessRule, Tally, REPORT_SCHEMA_VERSION,
};
pub use runner::{
    evaluate, grid_run, product_grid, read_run_log, GridOutcome, LogRecord, Progress, RunOptions,
    DEFAULT_GRID,
};
pub use sandbox::{ExecOutcome, Executor, PythonSandbox, SandboxConfig, SandboxError};
pub use task::{load_tasks, parse_tasks, tasks_hash, BenchmarkTask};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {reason}")]
    TaskFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Argument(String),
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("generation for task `{task}` failed: {source}")]
    Backend {
        task: String,
        #[source]
        source: BackendError,
    },
    #[error("run interrupted in cell {cell} after {completed}/{total} tasks; rerun to resume")]
    Interrupted {
        cell: String,
        completed: usize,
        total: usize,
    },
    #[error("run directory {path} belongs to a different run: {reason}")]
    RunMismatch { path: PathBuf, reason: String },
}

impl HarnessError {
    /// True for failures of the machinery (sandbox, backend, disk) rather
    /// than of the inputs.
    pub fn is_infrastructure(&self) -> bool {
        matches!(
            self,
            HarnessError::Io { .. }
                | HarnessError::Sandbox(_)
                | HarnessError::Backend { .. }
                | HarnessError::Interrupted { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Error,
    Timeout,
    SkippedMissingDep,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Error => "error",
            Status::Timeout => "timeout",
            Status::SkippedMissingDep => "skipped-missing-dep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub index: usize,
    pub seed: u64,
    pub status: Status,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr_excerpt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub category: TaskCategory,
    pub n: usize,
    pub c: usize,
    pub per_completion: Vec<CompletionRecord>,
    pub decoding: DecodingParams,
    /// All completions had the same code (typical at T = 0).
    #[serde(default)]
    pub identical_completions: bool,
}

impl TaskResult {
    /// Builds a result, deriving `n` and `c` from the records.
    pub fn new(
        task_id: impl Into<String>,
        category: TaskCategory,
        per_completion: Vec<CompletionRecord>,
        decoding: DecodingParams,
    ) -> Self {
        let c = per_completion
            .iter()
            .filter(|r| r.status == Status::Pass)
            .count();
        Self {
            task_id: task_id.into(),
            category,
            n: per_completion.len(),
            c,
            per_completion,
            decoding,
            identical_completions: false,
        }
    }

    /// Synthetic result with `c` passes among `n` completions; the passes
    /// come first.
    pub fn from_counts(
        task_id: impl Into<String>,
        category: TaskCategory,
        n: usize,
        c: usize,
    ) -> Self {
        assert!(c <= n, "c must not exceed n");
        let per_completion = (0..n)
            .map(|i| CompletionRecord {
                index: i,
                seed: i as u64,
                status: if i < c { Status::Pass } else { Status::Fail },
                duration_ms: 0.0,
                stderr_excerpt: String::new(),
                violations: Vec::new(),
            })
            .collect();
        Self::new(task_id, category, per_completion, DecodingParams::default())
    }

    pub fn skipped(&self) -> bool {
        self.n > 0
            && self
                .per_completion
                .iter()
                .all(|r| r.status == Status::SkippedMissingDep)
    }
}

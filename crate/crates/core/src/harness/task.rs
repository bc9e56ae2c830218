use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::TaskCategory;

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub id: String,
    pub category: TaskCategory,
    pub prompt: String,
    pub entry_point: String,
    /// Python run after the candidate in the same namespace. A `check`
    /// function, if defined, is called with the entry point.
    pub test_code: String,
    /// Wall-clock limit in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    /// Importable Python modules the task needs.
    #[serde(default)]
    pub requires: Vec<String>,
    /// Reference solution; drives the hermetic mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_solution: Option<String>,
}

impl BenchmarkTask {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is blank".into());
        }
        if self.prompt.trim().is_empty() {
            return Err("prompt is blank".into());
        }
        if self.entry_point.trim().is_empty() {
            return Err("entry_point is blank".into());
        }
        if !self.test_code.contains(&self.entry_point) && !self.test_code.contains("def check") {
            return Err(format!("test_code never references `{}`", self.entry_point));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(format!("timeout must be positive, got {}", self.timeout));
        }
        Ok(())
    }
}

/// Parses line-delimited task records. Unlike corpora, a task file is
/// all-or-nothing: the first bad record fails the load.
pub fn parse_tasks(text: &str, origin: &str) -> Result<Vec<BenchmarkTask>, HarnessError> {
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| HarnessError::TaskFile {
            path: origin.to_string(),
            line: i + 1,
            reason,
        };
        let task: BenchmarkTask = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        task.validate().map_err(bad)?;
        if !ids.insert(task.id.clone()) {
            return Err(HarnessError::DuplicateTask(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<BenchmarkTask>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tasks(&text, &path.display().to_string())
}

/// Content hash of a task set, stable under reformatting of the file.
pub fn tasks_hash(tasks: &[BenchmarkTask]) -> String {
    let mut h = Sha256::new();
    h.update(format!("tasks {}\0", tasks.len()).as_bytes());
    for t in tasks {
        h.update(serde_json::to_vec(t).expect("tasks serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

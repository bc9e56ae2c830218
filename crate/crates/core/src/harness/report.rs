use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{pass_at_k, HarnessError, Status, TaskResult};
use crate::TaskCategory;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub success: usize,
    pub failed: usize,
    /// Percent, rounded to 2 decimals.
    pub accuracy: f64,
}

impl Tally {
    pub fn new(success: usize, failed: usize) -> Self {
        let total = success + failed;
        let accuracy = if total == 0 {
            0.0
        } else {
            (success as f64 / total as f64 * 10_000.0).round() / 100.0
        };
        Self {
            success,
            failed,
            accuracy,
        }
    }

    pub fn total(&self) -> usize {
        self.success + self.failed
    }

    fn add(&self, other: &Tally) -> Tally {
        Tally::new(self.success + other.success, self.failed + other.failed)
    }
}

/// When a task counts as a success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuccessRule {
    /// `None`: at least one of all n completions passes. `Some(k)`: at
    /// least one of the first k completions passes.
    pub k: Option<usize>,
}

impl SuccessRule {
    pub fn describe(&self) -> String {
        match self.k {
            None => "success = at least one of the n completions passes".into(),
            Some(k) => format!("success = at least one of the first {k} completion(s) passes"),
        }
    }

    pub fn is_success(&self, r: &TaskResult) -> bool {
        let k = self.k.unwrap_or(r.n).min(r.per_completion.len());
        r.per_completion[..k]
            .iter()
            .any(|c| c.status == Status::Pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub temperature: f64,
    pub top_p: f64,
}

impl CellSpec {
    pub fn label(&self) -> String {
        format!("T={} top_p={}", self.temperature, self.top_p)
    }

    /// Directory-safe name.
    pub fn slug(&self) -> String {
        format!("t{}_p{}", self.temperature, self.top_p)
    }
}

impl FromStr for CellSpec {
    type Err = String;

    /// Parses `T:top_p`, e.g. `0.5:0.5`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (t, p) = s
            .split_once(':')
            .ok_or_else(|| format!("expected T:top_p, got `{s}`"))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
        Ok(CellSpec {
            temperature: num(t)?,
            top_p: num(p)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTally {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub success_rule: SuccessRule,
    pub success_rule_text: String,
    /// Evaluated tasks; skipped ones are excluded.
    pub tasks: usize,
    pub skipped: usize,
    /// Tasks whose n completions were all the same code.
    pub identical_completion_tasks: usize,
    pub overall: Tally,
    pub per_category: BTreeMap<TaskCategory, Tally>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_cell: Vec<CellTally>,
    /// Mean Pass@k over evaluated tasks with n >= k.
    pub pass_at: BTreeMap<usize, f64>,
}

pub fn aggregate(
    results: &[TaskResult],
    rule: SuccessRule,
    ks: &[usize],
) -> Result<EvalReport, HarnessError> {
    let mut ids = HashSet::new();
    for r in results {
        if !ids.insert(r.task_id.as_str()) {
            return Err(HarnessError::DuplicateTask(r.task_id.clone()));
        }
        if r.n != r.per_completion.len() || r.c > r.n {
            return Err(HarnessError::Argument(format!(
                "task `{}` has inconsistent n/c",
                r.task_id
            )));
        }
    }
    if rule.k == Some(0) {
        return Err(HarnessError::Argument("success rule k must be >= 1".into()));
    }

    let evaluated: Vec<&TaskResult> = results.iter().filter(|r| !r.skipped() && r.n > 0).collect();
    let mut per_category: BTreeMap<TaskCategory, (usize, usize)> = BTreeMap::new();
    for r in &evaluated {
        let e = per_category.entry(r.category).or_default();
        if rule.is_success(r) {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let success: usize = per_category.values().map(|v| v.0).sum();

    let mut pass_at = BTreeMap::new();
    for &k in ks {
        let eligible: Vec<&&TaskResult> = evaluated.iter().filter(|r| r.n >= k).collect();
        if k == 0 || eligible.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for r in &eligible {
            sum += pass_at_k(r.n, r.c, k)?;
        }
        pass_at.insert(k, sum / eligible.len() as f64);
    }

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        success_rule: rule,
        success_rule_text: rule.describe(),
        tasks: evaluated.len(),
        skipped: results.len() - evaluated.len(),
        identical_completion_tasks: evaluated.iter().filter(|r| r.identical_completions).count(),
        overall: Tally::new(success, evaluated.len() - success),
        per_category: per_category
            .into_iter()
            .map(|(k, (s, f))| (k, Tally::new(s, f)))
            .collect(),
        per_cell: Vec::new(),
        pass_at,
    })
}

/// Folds per-cell reports into one grid report: `per_cell` lists each
/// cell, while `overall` and `per_category` pool all cells.
pub fn merge_cells(cells: &[(CellSpec, EvalReport)]) -> EvalReport {
    let rule = cells.first().map(|c| c.1.success_rule).unwrap_or_default();
    let mut overall = Tally::new(0, 0);
    let mut per_category: BTreeMap<TaskCategory, Tally> = BTreeMap::new();
    let mut per_cell = Vec::new();
    let (mut tasks, mut skipped, mut identical) = (0, 0, 0);
    for (spec, r) in cells {
        overall = overall.add(&r.overall);
        for (cat, t) in &r.per_category {
            let e = per_category.entry(*cat).or_insert_with(|| Tally::new(0, 0));
            *e = e.add(t);
        }
        per_cell.push(CellTally {
            temperature: spec.temperature,
            top_p: spec.top_p,
            tally: r.overall,
        });
        tasks += r.tasks;
        skipped += r.skipped;
        identical += r.identical_completion_tasks;
    }
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        success_rule: rule,
        success_rule_text: rule.describe(),
        tasks,
        skipped,
        identical_completion_tasks: identical,
        overall,
        per_category,
        per_cell,
        pass_at: BTreeMap::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TextTable,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text-table" | "text" => Ok(ReportFormat::TextTable),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format `{other}` (text-table, json, csv)"
            )),
        }
    }
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<w$}", cell, w = widths[0]);
            } else {
                let _ = write!(s, "  {:>w$}", cell, w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let rule_len = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

/// Success / Failed / Accuracy rows with one column per tally.
fn metric_rows(columns: &[&Tally]) -> Vec<Vec<String>> {
    let row = |name: &str, f: &dyn Fn(&Tally) -> String| {
        std::iter::once(name.to_string())
            .chain(columns.iter().map(|t| f(t)))
            .collect()
    };
    vec![
        row("Success", &|t| t.success.to_string()),
        row("Failed", &|t| t.failed.to_string()),
        row("Accuracy (%)", &|t| format!("{:.2}", t.accuracy)),
    ]
}

fn is_empty(r: &EvalReport) -> bool {
    r.tasks == 0 && r.per_cell.is_empty()
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::from("scope,key,success,failed,accuracy\n");
            if is_empty(report) {
                return out;
            }
            let mut push = |scope: &str, key: &str, t: &Tally| {
                let _ = writeln!(
                    out,
                    "{scope},{key},{},{},{:.2}",
                    t.success, t.failed, t.accuracy
                );
            };
            push("overall", "all", &report.overall);
            for (cat, t) in &report.per_category {
                push("category", cat.as_str(), t);
            }
            for c in &report.per_cell {
                let spec = CellSpec {
                    temperature: c.temperature,
                    top_p: c.top_p,
                };
                push("cell", &spec.label(), &c.tally);
            }
            out
        }
        ReportFormat::TextTable => {
            let mut out = format!(
                "# {}\n# tasks: {} evaluated, {} skipped\n\n",
                report.success_rule_text, report.tasks, report.skipped
            );
            let (header, tallies): (Vec<String>, Vec<&Tally>) = if report.per_cell.is_empty() {
                (vec![String::new(), "overall".into()], vec![&report.overall])
            } else {
                let labels = report.per_cell.iter().map(|c| {
                    CellSpec {
                        temperature: c.temperature,
                        top_p: c.top_p,
                    }
                    .label()
                });
                (
                    std::iter::once(String::new()).chain(labels).collect(),
                    report.per_cell.iter().map(|c| &c.tally).collect(),
                )
            };
            if is_empty(report) {
                out.push_str(&render_table(&header, &[]));
                return out;
            }
            out.push_str(&render_table(&header, &metric_rows(&tallies)));
            if !report.per_category.is_empty() {
                out.push('\n');
                let header: Vec<String> =
                    ["category", "tasks", "success", "failed", "accuracy (%)"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect();
                let rows: Vec<Vec<String>> = report
                    .per_category
                    .iter()
                    .map(|(cat, t)| {
                        vec![
                            cat.to_string(),
                            t.total().to_string(),
                            t.success.to_string(),
                            t.failed.to_string(),
                            format!("{:.2}", t.accuracy),
                        ]
                    })
                    .collect();
                out.push_str(&render_table(&header, &rows));
            }
            if !report.pass_at.is_empty() {
                out.push('\n');
                let header = vec!["k".to_string(), "pass@k".to_string()];
                let rows: Vec<Vec<String>> = report
                    .pass_at
                    .iter()
                    .map(|(k, v)| vec![k.to_string(), format!("{v:.4}")])
                    .collect();
                out.push_str(&render_table(&header, &rows));
            }
            out
        }
    }
}

/// Side-by-side table of named tallies, e.g. several systems on one task set.
pub fn emit_comparison(columns: &[(String, Tally)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let cols: Vec<serde_json::Value> = columns
                .iter()
                .map(|(name, t)| serde_json::json!({"name": name, "success": t.success, "failed": t.failed, "accuracy": t.accuracy}))
                .collect();
            serde_json::to_string_pretty(&serde_json::json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "columns": cols,
            }))
            .expect("comparison serializes")
                + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::from("column,success,failed,accuracy\n");
            for (name, t) in columns {
                let _ = writeln!(out, "{name},{},{},{:.2}", t.success, t.failed, t.accuracy);
            }
            out
        }
        ReportFormat::TextTable => {
            let header: Vec<String> = std::iter::once(String::new())
                .chain(columns.iter().map(|(n, _)| n.clone()))
                .collect();
            let tallies: Vec<&Tally> = columns.iter().map(|(_, t)| t).collect();
            let rows = if columns.is_empty() {
                Vec::new()
            } else {
                metric_rows(&tallies)
            };
            render_table(&header, &rows)
        }
    }
}

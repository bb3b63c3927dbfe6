use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{forgetting_delta, mean, render4, task_score, Exact};
use super::scoring::EvalResult;
use crate::error::{Error, Result};
use crate::synthdata::NlTag;

/// Per-tag NL means and their forgetting against the task-1 means.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitReport {
    pub nlu_mean: Exact,
    pub nlg_mean: Exact,
    pub nlu_delta: Exact,
    pub nlg_delta: Exact,
}

fn tag_mean(results: &[EvalResult], tag: NlTag) -> Result<Exact> {
    let accs: Vec<Exact> = results.iter().filter(|r| r.tag == Some(tag)).map(EvalResult::accuracy_exact).collect();
    if accs.is_empty() {
        return Err(Error::InvalidArgument(format!("no {} dataset in the NL suite", tag.name())));
    }
    mean(&accs)
}

pub fn split_report(current: &[EvalResult], baseline: &[EvalResult]) -> Result<SplitReport> {
    let nl: Vec<EvalResult> = current.iter().filter(|r| r.task == 1).cloned().collect();
    if let Some(r) = nl.iter().find(|r| r.tag.is_none()) {
        return Err(Error::InvalidArgument(format!("NL dataset {} has no NLU/NLG tag", r.dataset)));
    }
    let nlu_mean = tag_mean(&nl, NlTag::Nlu)?;
    let nlg_mean = tag_mean(&nl, NlTag::Nlg)?;
    Ok(SplitReport {
        nlu_delta: forgetting_delta(tag_mean(baseline, NlTag::Nlu)?, nlu_mean),
        nlg_delta: forgetting_delta(tag_mean(baseline, NlTag::Nlg)?, nlg_mean),
        nlu_mean,
        nlg_mean,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskScore {
    pub task: u8,
    pub omega: Exact,
    /// Zero in the row where the task is first scored.
    pub delta: Exact,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixRow {
    pub after_task: u8,
    pub results: Vec<EvalResult>,
    pub scores: Vec<TaskScore>,
    pub split: SplitReport,
}

impl MatrixRow {
    pub fn score(&self, task: u8) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == task)
    }

    /// Forgetting of the NL suite (task 1).
    pub fn nl_delta(&self) -> Exact {
        self.score(1).expect("every row scores the NL suite").delta
    }

    pub fn result(&self, dataset: &str) -> Option<&EvalResult> {
        self.results.iter().find(|r| r.dataset == dataset)
    }

    /// Arithmetic mean accuracy over non-NL datasets, if any.
    pub fn mean_vl_accuracy(&self) -> Option<Exact> {
        let accs: Vec<Exact> = self.results.iter().filter(|r| r.task > 1).map(EvalResult::accuracy_exact).collect();
        mean(&accs).ok()
    }
}

fn group(results: &[EvalResult]) -> BTreeMap<u8, Vec<Exact>> {
    let mut by: BTreeMap<u8, Vec<Exact>> = BTreeMap::new();
    for r in results {
        by.entry(r.task).or_default().push(r.accuracy_exact());
    }
    by
}

/// Accuracy, ω and Δ per (after-task, evaluated-task).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForgettingMatrix {
    pub nl_baseline: Vec<EvalResult>,
    pub rows: Vec<MatrixRow>,
}

impl ForgettingMatrix {
    pub fn new(nl_baseline: Vec<EvalResult>) -> Result<Self> {
        if nl_baseline.is_empty() {
            return Err(Error::MissingBaseline("NL suite".into()));
        }
        Ok(Self { nl_baseline, rows: Vec::new() })
    }

    /// Reference ω of `task`: the task-1 baseline for the NL suite, otherwise
    /// the first row in which the task was scored.
    pub fn reference(&self, task: u8) -> Option<Exact> {
        if task == 1 {
            let accs: Vec<Exact> = self.nl_baseline.iter().map(EvalResult::accuracy_exact).collect();
            return task_score(&accs).ok();
        }
        self.rows.iter().find_map(|r| r.score(task)).map(|s| s.omega)
    }

    pub fn push_row(&mut self, after_task: u8, results: Vec<EvalResult>) -> Result<&MatrixRow> {
        if let Some(last) = self.rows.last() {
            if after_task <= last.after_task {
                return Err(Error::InvalidArgument(format!("row {after_task} after row {}", last.after_task)));
            }
        }
        let mut scores = Vec::new();
        for (task, accs) in group(&results) {
            let omega = task_score(&accs)?;
            let reference = match self.reference(task) {
                Some(r) => r,
                None if task == 1 => return Err(Error::MissingBaseline("NL suite".into())),
                None => omega,
            };
            scores.push(TaskScore { task, omega, delta: forgetting_delta(reference, omega) });
        }
        if !scores.iter().any(|s| s.task == 1) {
            return Err(Error::InvalidArgument(format!("row {after_task} lacks the NL suite")));
        }
        let split = split_report(&results, &self.nl_baseline)?;
        self.rows.push(MatrixRow { after_task, results, scores, split });
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn final_row(&self) -> Option<&MatrixRow> {
        self.rows.last()
    }
}

/// Identity of a run, written next to its reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub data_hash: String,
    pub mode: String,
    pub method: String,
    pub seeds: BTreeMap<String, u64>,
}

pub const REPORT_COLUMNS: [&str; 10] =
    ["run_id", "after_task_k", "eval_task_t", "dataset", "mode", "n", "accuracy", "omega", "delta", "tag"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub after_task_k: u8,
    pub eval_task_t: u8,
    pub dataset: String,
    pub mode: String,
    pub n: usize,
    pub accuracy: String,
    pub omega: String,
    pub delta: String,
    pub tag: String,
}

pub fn report_rows(matrix: &ForgettingMatrix, run_id: &str) -> Vec<ReportRow> {
    let mut out = Vec::new();
    for row in &matrix.rows {
        for r in &row.results {
            let s = row.score(r.task).expect("every result's task is scored");
            out.push(ReportRow {
                run_id: run_id.to_string(),
                after_task_k: row.after_task,
                eval_task_t: r.task,
                dataset: r.dataset.clone(),
                mode: r.mode.name().to_string(),
                n: r.count,
                accuracy: render4(&r.accuracy_exact()),
                omega: render4(&s.omega),
                delta: render4(&s.delta),
                tag: r.tag.map_or("VL", NlTag::name).to_string(),
            });
        }
    }
    out
}

pub fn report_csv(matrix: &ForgettingMatrix, run_id: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in report_rows(matrix, run_id) {
        w.serialize(r).map_err(|e| Error::format("report csv", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("report csv", e))?;
    String::from_utf8(bytes).map_err(|e| Error::format("report csv", e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| Error::format(path.display().to_string(), e))
}

fn num(r: &Exact) -> serde_json::Value {
    serde_json::Value::from(render4(r).parse::<f64>().expect("rendered decimal"))
}

/// JSON summary: per row, the NL score and split, and every task's ω and Δ.
pub fn summary_json(matrix: &ForgettingMatrix, manifest: &RunManifest) -> serde_json::Value {
    use serde_json::json;
    let rows: Vec<_> = matrix
        .rows
        .iter()
        .map(|row| {
            let tasks: Vec<_> = row
                .scores
                .iter()
                .map(|s| {
                    let datasets: Vec<_> = row
                        .results
                        .iter()
                        .filter(|r| r.task == s.task)
                        .map(|r| json!({"dataset": r.dataset, "correct": r.correct, "n": r.count, "accuracy": num(&r.accuracy_exact())}))
                        .collect();
                    json!({"task": s.task, "omega": num(&s.omega), "delta": num(&s.delta), "datasets": datasets})
                })
                .collect();
            let nl = row.score(1).expect("NL scored");
            json!({
                "after_task": row.after_task,
                "nl": {
                    "omega": num(&nl.omega),
                    "delta": num(&nl.delta),
                    "nlu_mean": num(&row.split.nlu_mean),
                    "nlg_mean": num(&row.split.nlg_mean),
                    "nlu_delta": num(&row.split.nlu_delta),
                    "nlg_delta": num(&row.split.nlg_delta),
                },
                "mean_vl_accuracy": row.mean_vl_accuracy().map(|a| num(&a)),
                "tasks": tasks,
            })
        })
        .collect();
    json!({
        "run_id": manifest.run_id,
        "config_hash": manifest.config_hash,
        "data_hash": manifest.data_hash,
        "mode": manifest.mode,
        "method": manifest.method,
        "rows": rows,
    })
}

pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `report.csv`, `summary.json` and `manifest.json` into `dir`.
pub fn serialize_report(matrix: &ForgettingMatrix, manifest: &RunManifest, dir: &Path) -> Result<ReportFiles> {
    if matrix.rows.is_empty() {
        return Err(Error::InvalidArgument("forgetting matrix has no rows".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        csv: dir.join("report.csv"),
        summary: dir.join("summary.json"),
        manifest: dir.join("manifest.json"),
    };
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&files.csv, report_csv(matrix, &manifest.run_id)?)?;
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("json value") + "\n";
    write(&files.summary, pretty(&summary_json(matrix, manifest)))?;
    write(&files.manifest, pretty(&serde_json::to_value(manifest).expect("manifest")))?;
    Ok(files)
}

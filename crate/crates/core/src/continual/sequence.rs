use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::evaluate_all_seen;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{EvalResult, ForgettingMatrix};
use crate::mitigation::{lora_attach, lora_merge, rehearsal_mix, MethodSpec, RehearsalBuffer};
use crate::rng::{derive_seed, rng_from, shuffle};
use crate::scalar::Scalar;
use crate::synthdata::{DataBundle, EvalMode, Sample, TaskDataset, TaskKind};
use crate::training::{train_alignment_stage, train_task, MetricsLog, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Alignment, then one pass over the union of all VL tasks.
    TwoTask,
    /// Caption, VQA, OCR, grounding in order.
    Continual,
}

impl SequenceMode {
    pub fn name(self) -> &'static str {
        match self {
            SequenceMode::TwoTask => "two_task",
            SequenceMode::Continual => "continual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub alignment: StageConfig,
    pub fine_tune: StageConfig,
    pub method: MethodSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alignment: StageConfig::desk_alignment(),
            fine_tune: StageConfig::desk_fine_tune(),
            method: MethodSpec::default(),
        }
    }
}

/// One step of a task sequence.
#[derive(Clone, Debug)]
pub struct SequenceTask {
    /// Its train split feeds the stream and the rehearsal buffer.
    pub dataset: TaskDataset,
    /// Caption data for the alignment stage that precedes this task.
    pub alignment: Option<Vec<Sample>>,
    /// Test sets scored for this task once it has been seen.
    pub eval: Vec<TaskDataset>,
}

/// Task 2 as the merged VL mixture, its train split shuffled once.
pub fn two_task_sequence(bundle: &DataBundle, seed: u64) -> Vec<SequenceTask> {
    let caption = bundle.vl_task(TaskKind::CaptionInstruct);
    let mut train: Vec<Sample> = bundle.vl_tasks.iter().flat_map(|d| d.train.iter().cloned()).collect();
    shuffle(&mut train, &mut rng_from(seed));
    let dataset = TaskDataset {
        name: "vl_mixture".into(),
        task_id: 2,
        kind: TaskKind::CaptionInstruct,
        mode: EvalMode::GenerativeExactMatch,
        tag: None,
        train,
        test: Vec::new(),
        alignment: Vec::new(),
    };
    let eval = bundle.vl_tasks.iter().filter(|d| d.kind != TaskKind::CaptionInstruct).cloned().collect();
    vec![SequenceTask { dataset, alignment: Some(caption.alignment.clone()), eval }]
}

/// Tasks 2..5; the caption task has no test set of its own.
pub fn continual_sequence(bundle: &DataBundle) -> Vec<SequenceTask> {
    TaskKind::VL
        .iter()
        .map(|&k| {
            let d = bundle.vl_task(k);
            let first = k == TaskKind::CaptionInstruct;
            SequenceTask {
                dataset: d.clone(),
                alignment: first.then(|| d.alignment.clone()),
                eval: if first { Vec::new() } else { vec![d.clone()] },
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    pub matrix: ForgettingMatrix,
    pub checkpoint: Checkpoint<S>,
}

/// Directory holding per-task checkpoints and completed matrix rows so a
/// run can resume after the last finished task.
pub struct RunStore {
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoredRow {
    after_task: u8,
    results: Vec<EvalResult>,
}

impl RunStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn checkpoint_path(&self, task: u8) -> PathBuf {
        self.dir.join(format!("task{task}.ckpt"))
    }

    fn rows_path(&self) -> PathBuf {
        self.dir.join("rows.json")
    }

    fn load_rows(&self) -> Result<Vec<StoredRow>> {
        let p = self.rows_path();
        if !p.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(p.display().to_string(), e))
    }

    fn save_rows(&self, matrix: &ForgettingMatrix) -> Result<()> {
        let rows: Vec<StoredRow> = matrix
            .rows
            .iter()
            .map(|r| StoredRow { after_task: r.after_task, results: r.results.clone() })
            .collect();
        let p = self.rows_path();
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn checkpoint_for(&self, task: u8) -> Option<PathBuf> {
        Some(self.checkpoint_path(task)).filter(|p| p.exists())
    }
}

fn check_labels(tasks: &[SequenceTask]) -> Result<()> {
    let mut prev = 1;
    for t in tasks {
        if t.dataset.task_id <= prev {
            return Err(Error::Config("task ids must increase strictly from 2".into()));
        }
        prev = t.dataset.task_id;
    }
    if tasks.first().is_some_and(|t| t.alignment.is_none()) {
        return Err(Error::Config("task 2 must carry the alignment subset".into()));
    }
    Ok(())
}

/// Trains and evaluates each task in order, handing the merged checkpoint
/// from one task to the next.
pub fn run_sequence<S: Scalar>(
    base: &Checkpoint<S>,
    tasks: &[SequenceTask],
    nl_suite: &[TaskDataset],
    exp: &ExperimentConfig,
    run_hash: &str,
    log: &mut MetricsLog,
    store: Option<&RunStore>,
) -> Result<RunOutcome<S>> {
    check_labels(tasks)?;
    if base.baselines.is_empty() {
        return Err(Error::MissingBaseline("task-1 checkpoint carries no NL baselines".into()));
    }
    let method = &exp.method;
    method.validate(base.params.config.vocab)?;

    let mut matrix = ForgettingMatrix::new(base.baselines.clone())?;
    matrix.push_row(1, base.baselines.clone())?;
    let mut ckpt = base.clone();
    ckpt.config_hash = run_hash.to_string();
    if method.uses_rehearsal() {
        ckpt.buffer = RehearsalBuffer::new(method.rehearsal_fraction);
    }

    let mut resume_from = 0;
    if let Some(st) = store {
        let rows = st.load_rows()?;
        if let Some(last) = rows.last().map(|r| r.after_task).filter(|&k| k > 1) {
            let path = st.checkpoint_path(last);
            ckpt = Checkpoint::load_expecting(&path, run_hash)?;
            for r in rows.into_iter().filter(|r| r.after_task > 1) {
                matrix.push_row(r.after_task, r.results)?;
            }
            resume_from = tasks.iter().position(|t| t.dataset.task_id == last).map_or(0, |i| i + 1);
        }
    }

    for (i, task) in tasks.iter().enumerate().skip(resume_from) {
        let id = task.dataset.task_id;
        let seed = ckpt.next_seed()?;
        if let Some(align) = &task.alignment {
            train_alignment_stage(&mut ckpt, align, &exp.alignment, method.alignment_rule(), log)?;
        }
        let stream = if method.uses_rehearsal() {
            rehearsal_mix(&task.dataset.train, &ckpt.buffer, seed)
        } else {
            task.dataset.train.clone()
        };
        if method.uses_lora() {
            let mut adapters = lora_attach(&ckpt.params, &method.lora, seed)?;
            train_task(&mut ckpt, Some(&mut adapters), &stream, method, &exp.fine_tune, id, log)?;
            ckpt.params = lora_merge(ckpt.params.clone(), adapters)?;
        } else {
            train_task(&mut ckpt, None, &stream, method, &exp.fine_tune, id, log)?;
        }
        if method.uses_rehearsal() {
            ckpt.buffer.extend(&task.dataset, seed)?;
        }
        ckpt.completed_task = id;

        let seen: Vec<&SequenceTask> = tasks[..=i].iter().collect();
        let results = evaluate_all_seen(&ckpt, &seen, nl_suite)?;
        matrix.push_row(id, results)?;
        if let Some(st) = store {
            ckpt.save(&st.checkpoint_path(id))?;
            st.save_rows(&matrix)?;
        }
    }
    Ok(RunOutcome { matrix, checkpoint: ckpt })
}

pub fn run_two_task<S: Scalar>(
    base: &Checkpoint<S>,
    bundle: &DataBundle,
    exp: &ExperimentConfig,
    run_hash: &str,
    log: &mut MetricsLog,
    store: Option<&RunStore>,
) -> Result<RunOutcome<S>> {
    let tasks = two_task_sequence(bundle, derive_seed(bundle.seed, "vl_mixture"));
    run_sequence(base, &tasks, &bundle.nl_suite, exp, run_hash, log, store)
}

pub fn run_continual<S: Scalar>(
    base: &Checkpoint<S>,
    bundle: &DataBundle,
    exp: &ExperimentConfig,
    run_hash: &str,
    log: &mut MetricsLog,
    store: Option<&RunStore>,
) -> Result<RunOutcome<S>> {
    run_sequence(base, &continual_sequence(bundle), &bundle.nl_suite, exp, run_hash, log, store)
}

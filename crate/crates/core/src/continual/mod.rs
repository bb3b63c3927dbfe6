//! Task sequences: the pretrained base LM, the two-task recipe and the
//! five-task continual run, with per-task evaluation.

mod pretrain;
mod sequence;

pub use pretrain::{floor_report, pretrain_base_lm, PretrainConfig, PretrainOutcome};
pub use sequence::{
    continual_sequence, run_continual, run_sequence, run_two_task, two_task_sequence, ExperimentConfig, RunOutcome,
    RunStore, SequenceMode, SequenceTask,
};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalResult, ModelPredictor};
use crate::model::Parameters;
use crate::scalar::Scalar;
use crate::synthdata::TaskDataset;

/// NL suite results, scored as task 1.
pub fn evaluate_suite<S: Scalar>(params: &Parameters<S>, nl_suite: &[TaskDataset]) -> Result<Vec<EvalResult>> {
    let m = ModelPredictor::new(params);
    nl_suite.iter().map(|d| evaluate_dataset(&m, d, 1)).collect()
}

/// One matrix row's results: the NL suite plus every test set of the seen
/// tasks, on merged weights.
pub fn evaluate_all_seen<S: Scalar>(
    ckpt: &Checkpoint<S>,
    seen: &[&SequenceTask],
    nl_suite: &[TaskDataset],
) -> Result<Vec<EvalResult>> {
    if ckpt.baselines.is_empty() {
        return Err(Error::MissingBaseline("NL suite".into()));
    }
    let mut out = evaluate_suite(&ckpt.params, nl_suite)?;
    let m = ModelPredictor::new(&ckpt.params);
    for t in seen {
        for d in &t.eval {
            out.push(evaluate_dataset(&m, d, t.dataset.task_id)?);
        }
    }
    Ok(out)
}

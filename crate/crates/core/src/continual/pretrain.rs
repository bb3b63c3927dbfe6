use serde::{Deserialize, Serialize};

use super::evaluate_suite;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::EvalResult;
use crate::mitigation::TargetRule;
use crate::model::{init_parameters, ModelConfig, TrainabilityMask};
use crate::rng::{rng_for, shuffle};
use crate::scalar::Scalar;
use crate::synthdata::{EvalMode, Sample, TaskDataset};
use crate::training::{MetricsLog, StageConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub stage: StageConfig,
    /// Steps always taken before the floor is checked.
    pub min_steps: usize,
    /// Hard cap; also the length of the learning-rate schedule.
    pub max_steps: usize,
    pub eval_every: usize,
    /// Every NLU set must reach this multiple of its chance level.
    pub nlu_chance_factor: f64,
    pub nlg_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig::desk_pretrain(),
            min_steps: 1500,
            max_steps: 4000,
            eval_every: 250,
            nlu_chance_factor: 2.0,
            nlg_floor: 0.3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        if self.max_steps == 0 || self.min_steps > self.max_steps || self.eval_every == 0 {
            return Err(Error::Config("pretraining needs 0 < min_steps <= max_steps and eval_every > 0".into()));
        }
        Ok(())
    }
}

/// Whether NL results clear the floor, with a description of the misses.
pub fn floor_report(suite: &[TaskDataset], results: &[EvalResult], cfg: &PretrainConfig) -> (bool, String) {
    let mut misses = Vec::new();
    for (d, r) in suite.iter().zip(results) {
        let need = match d.mode {
            EvalMode::MultipleChoice => cfg.nlu_chance_factor * d.chance_level(),
            EvalMode::GenerativeExactMatch => cfg.nlg_floor,
        };
        if r.accuracy() < need {
            misses.push(format!("{} {:.3} < {:.3}", r.dataset, r.accuracy(), need));
        }
    }
    (misses.is_empty(), misses.join(", "))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub steps: usize,
    /// NL results at every floor check, in step order.
    pub history: Vec<(usize, Vec<EvalResult>)>,
}

/// Trains the text-only LM until the NL floor holds (after `min_steps`) or
/// the cap is hit; records the final NL results as the task-1 baselines.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_base_lm<S: Scalar>(
    model: &ModelConfig,
    corpus: &TaskDataset,
    nl_suite: &[TaskDataset],
    cfg: &PretrainConfig,
    init_seed: u64,
    train_seed: u64,
    config_hash: &str,
    log: &mut MetricsLog,
) -> Result<PretrainOutcome<S>> {
    cfg.validate()?;
    model.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let mut ckpt = Checkpoint::new(init_parameters::<S>(model, init_seed)?, config_hash, train_seed);
    let mut trainer =
        Trainer::new(&cfg.stage, TrainabilityMask::pretraining(), TargetRule::OneHot, cfg.max_steps, 1)?;
    let mut rng = rng_for(train_seed, "pretrain.order");
    let mut order: Vec<&Sample> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::new();
    let b = cfg.stage.batch_size;
    while trainer.step < cfg.max_steps {
        if cursor + b > order.len() {
            order = corpus.train.iter().collect();
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + b).min(order.len())];
        cursor += b;
        trainer.step(&mut ckpt.params, None, batch, log)?;
        let s = trainer.step;
        if s >= cfg.min_steps && (s % cfg.eval_every == 0 || s == cfg.max_steps) {
            let results = evaluate_suite(&ckpt.params, nl_suite)?;
            let (ok, _) = floor_report(nl_suite, &results, cfg);
            history.push((s, results.clone()));
            if ok {
                ckpt.baselines = results;
                ckpt.completed_task = 1;
                return Ok(PretrainOutcome { checkpoint: ckpt, steps: s, history });
            }
        }
    }
    let last = match history.last() {
        Some((_, r)) => r.clone(),
        None => evaluate_suite(&ckpt.params, nl_suite)?,
    };
    let (_, misses) = floor_report(nl_suite, &last, cfg);
    Err(Error::FloorUnreachable(format!("after {} steps: {misses}", cfg.max_steps)))
}

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use super::config::{lr_at, StageConfig};
use super::optim::{optimizer_step, OptimizerState};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mitigation::{AdapterSet, MethodSpec, TargetRule};
use crate::model::{accumulate_sample, Grads, Parameters, TrainabilityMask};
use crate::scalar::Scalar;
use crate::synthdata::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub task: u8,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn to_csv(&self, header: bool) -> String {
        let mut s = String::new();
        if header {
            s.push_str("step,task,loss,lr\n");
        }
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:e}\n", r.step, r.task, r.loss, r.lr));
        }
        s
    }

    /// Appends the rows to `path`, writing the header when the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(fresh).as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_loss: f64,
}

/// Step-wise driver over a fixed schedule length.
pub struct Trainer<'a, S> {
    pub cfg: &'a StageConfig,
    pub mask: TrainabilityMask,
    pub rule: TargetRule,
    pub total: usize,
    pub task: u8,
    pub step: usize,
    pub optimizer: OptimizerState<S>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(cfg: &'a StageConfig, mask: TrainabilityMask, rule: TargetRule, total: usize, task: u8) -> Result<Self> {
        cfg.validate()?;
        if total == 0 {
            return Err(Error::InvalidArgument("stage with zero steps".into()));
        }
        Ok(Self { cfg, mask, rule, total, task, step: 0, optimizer: OptimizerState::new() })
    }

    /// Accumulates the batch gradient micro-batch by micro-batch in sample
    /// order, then applies one optimizer update.
    pub fn step(
        &mut self,
        params: &mut Parameters<S>,
        mut adapters: Option<&mut AdapterSet<S>>,
        batch: &[&Sample],
        log: &mut MetricsLog,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let lr = lr_at(self.step, self.total, self.cfg)?;
        let mut grads = Grads::zeros(params, adapters.as_deref());
        let w = S::one() / S::of(batch.len() as f64);
        let micro = self.cfg.micro_batch.unwrap_or(batch.len());
        let mut loss = S::zero();
        for chunk in batch.chunks(micro) {
            for s in chunk {
                loss += accumulate_sample(params, adapters.as_deref(), s, &self.mask, self.rule, w, &mut grads)
                    .map_err(|e| self.at_step(e))?;
            }
        }
        let loss = (loss * w).to_f64_exact();
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: format!("loss in task {}", self.task), step: Some(self.step) });
        }
        let map = grads.to_map(&self.mask)?;
        optimizer_step(&mut self.optimizer, params, adapters.as_deref_mut(), &map, lr, self.cfg)
            .map_err(|e| self.at_step(e))?;
        log.rows.push(MetricRow { step: self.step, task: self.task, loss, lr });
        self.step += 1;
        Ok(loss)
    }

    /// Tags numeric failures with the stage step that produced them.
    fn at_step(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step: Some(self.step) },
            other => other,
        }
    }
}

/// One pass over `stream` in order, `ceil(|stream| / batch)` updates.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<S: Scalar>(
    params: &mut Parameters<S>,
    mut adapters: Option<&mut AdapterSet<S>>,
    stream: &[Sample],
    mask: TrainabilityMask,
    rule: TargetRule,
    cfg: &StageConfig,
    task: u8,
    log: &mut MetricsLog,
) -> Result<StageOutcome> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument(format!("empty training stream for task {task}")));
    }
    let total = cfg.steps_for(stream.len());
    let mut trainer = Trainer::new(cfg, mask, rule, total, task)?;
    let mut losses = Vec::with_capacity(total);
    for batch in stream.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = batch.iter().collect();
        losses.push(trainer.step(params, adapters.as_deref_mut(), &refs, log)?);
    }
    Ok(StageOutcome {
        steps: total,
        first_loss: losses[0],
        last_loss: losses[total - 1],
        mean_loss: losses.iter().sum::<f64>() / total as f64,
    })
}

/// Trains only the alignment projector on caption data for one epoch.
pub fn train_alignment_stage<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    alignment: &[Sample],
    cfg: &StageConfig,
    rule: TargetRule,
    log: &mut MetricsLog,
) -> Result<StageOutcome> {
    if alignment.is_empty() {
        return Err(Error::InvalidArgument("alignment data is empty".into()));
    }
    run_stage(&mut ckpt.params, None, alignment, TrainabilityMask::alignment_stage(), rule, cfg, 2, log)
}

/// One fine-tuning pass over `stream` under `method`. Adapters must be
/// attached exactly when the method is LoRA-based.
pub fn train_task<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    adapters: Option<&mut AdapterSet<S>>,
    stream: &[Sample],
    method: &MethodSpec,
    cfg: &StageConfig,
    task: u8,
    log: &mut MetricsLog,
) -> Result<StageOutcome> {
    if method.uses_lora() != adapters.is_some() {
        return Err(Error::AdapterMismatch(format!(
            "method {} {} adapters",
            method.variant.name(),
            if method.uses_lora() { "needs" } else { "must not have" }
        )));
    }
    method.validate(ckpt.params.config.vocab)?;
    let mask = if adapters.is_some() { TrainabilityMask::lora() } else { TrainabilityMask::fine_tuning() };
    run_stage(&mut ckpt.params, adapters, stream, mask, method.target_rule(), cfg, task, log)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    WarmupCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: ScheduleKind,
    /// Always 1 for alignment and fine-tuning.
    pub epochs: usize,
    /// Global batch size.
    pub batch_size: usize,
    /// Micro-batch size for gradient accumulation; `None` means one micro-batch.
    pub micro_batch: Option<usize>,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: AdamConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::desk_fine_tune()
    }
}

impl StageConfig {
    fn with(peak_lr: f64, batch_size: usize) -> Self {
        Self {
            peak_lr,
            warmup_ratio: 0.03,
            schedule: ScheduleKind::WarmupCosine,
            epochs: 1,
            batch_size,
            micro_batch: None,
            grad_clip: 0.0,
            optimizer: AdamConfig::default(),
        }
    }

    /// Alignment stage at LLaVA 1.5 scale.
    pub fn llava_alignment() -> Self {
        Self::with(1e-3, 256)
    }

    /// Fine-tuning at LLaVA 1.5 scale.
    pub fn llava_fine_tune() -> Self {
        Self::with(2e-5, 128)
    }

    pub fn desk_alignment() -> Self {
        Self::with(1e-3, 32)
    }

    /// Desk fine-tuning. The toy model needs a far larger step than the
    /// LLaVA 2e-5 to learn a task in one pass, and clipping keeps the
    /// early steps on a freshly aligned projector from blowing up.
    pub fn desk_fine_tune() -> Self {
        Self { grad_clip: 1.0, ..Self::with(7e-4, 16) }
    }

    pub fn desk_pretrain() -> Self {
        Self::with(3e-3, 16)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak lr {} must be finite and non-negative", self.peak_lr));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad(format!("warmup ratio {} outside (0, 1)", self.warmup_ratio));
        }
        if self.epochs != 1 {
            return bad(format!("stages run exactly one epoch, got {}", self.epochs));
        }
        if self.batch_size == 0 || self.micro_batch == Some(0) {
            return bad("batch sizes must be positive".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad clip {} must be finite and non-negative", self.grad_clip));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad("optimizer hyperparameters out of range".into());
        }
        Ok(())
    }

    pub fn steps_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Warmup length `ceil(ratio · total)`, computed exactly for ratios written
/// as short decimals.
pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    let exact = ratio * total as f64;
    let rounded = exact.round();
    let w = if (exact - rounded).abs() < 1e-9 * exact.max(1.0) { rounded } else { exact.ceil() };
    (w as usize).clamp(1, total.max(1))
}

/// Linear warmup to the peak, then cosine decay.
pub fn lr_at(step: usize, total: usize, cfg: &StageConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("schedule with zero total steps".into()));
    }
    if step >= total {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total}")));
    }
    let ScheduleKind::WarmupCosine = cfg.schedule;
    let w = warmup_steps(total, cfg.warmup_ratio);
    let peak = cfg.peak_lr;
    if step < w {
        return Ok(peak * (step + 1) as f64 / w as f64);
    }
    let span = (total - w) as f64;
    let progress = (step - w) as f64 / span;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

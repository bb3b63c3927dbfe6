//! The two-stage recipe: schedule, optimizer, and the alignment and
//! fine-tuning loops.

mod config;
mod optim;
mod stage;

pub use config::{lr_at, warmup_steps, AdamConfig, ScheduleKind, StageConfig};
pub use optim::{global_norm, optimizer_step, OptimizerState};
pub use stage::{run_stage, train_alignment_stage, train_task, MetricRow, MetricsLog, StageOutcome, Trainer};

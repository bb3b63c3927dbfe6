//! Forgetting mitigation: soft targets, LoRA, rehearsal, and their mSGM
//! compositions.

mod lora;
mod method;
mod rehearsal;
mod soft;

pub use lora::{lora_attach, lora_merge, AdapterSet, LoraAdapter, LoraConfig, LoraTargets, RankSpec};
pub use method::{build_target_distribution, MethodSpec, MethodVariant};
pub use rehearsal::{buffer_quota, rehearsal_mix, rehearsal_select, RehearsalBuffer};
pub use soft::{one_hot, smooth_targets, SoftTargetConfig, TargetRule};

use serde::{Deserialize, Serialize};

use super::lora::LoraConfig;
use super::soft::{SoftTargetConfig, TargetRule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    Naive,
    SoftTargets,
    Lora,
    Rehearsal,
    /// Soft targets composed with LoRA.
    Msgm,
    MsgmRehearsal,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 6] = [
        MethodVariant::Naive,
        MethodVariant::SoftTargets,
        MethodVariant::Lora,
        MethodVariant::Rehearsal,
        MethodVariant::Msgm,
        MethodVariant::MsgmRehearsal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::Naive => "naive",
            MethodVariant::SoftTargets => "soft_targets",
            MethodVariant::Lora => "lora",
            MethodVariant::Rehearsal => "rehearsal",
            MethodVariant::Msgm => "msgm",
            MethodVariant::MsgmRehearsal => "msgm_rehearsal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSpec {
    pub variant: MethodVariant,
    pub soft: SoftTargetConfig,
    pub lora: LoraConfig,
    pub rehearsal_fraction: f64,
    /// Apply smoothing in the alignment stage too (soft-target methods only).
    pub soft_in_alignment: bool,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self::new(MethodVariant::Naive)
    }
}

impl MethodSpec {
    pub fn new(variant: MethodVariant) -> Self {
        Self {
            variant,
            soft: SoftTargetConfig::default(),
            lora: LoraConfig::default(),
            rehearsal_fraction: 0.01,
            soft_in_alignment: true,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.soft.alpha = alpha;
        self
    }

    pub fn uses_soft_targets(&self) -> bool {
        matches!(self.variant, MethodVariant::SoftTargets | MethodVariant::Msgm | MethodVariant::MsgmRehearsal)
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self.variant, MethodVariant::Lora | MethodVariant::Msgm | MethodVariant::MsgmRehearsal)
    }

    pub fn uses_rehearsal(&self) -> bool {
        matches!(self.variant, MethodVariant::Rehearsal | MethodVariant::MsgmRehearsal)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.uses_soft_targets() {
            self.soft.validate(vocab)?;
        }
        if self.uses_rehearsal() && !(self.rehearsal_fraction > 0.0 && self.rehearsal_fraction <= 1.0) {
            return Err(Error::Config(format!("rehearsal fraction {} outside (0, 1]", self.rehearsal_fraction)));
        }
        Ok(())
    }

    /// Target rule for fine-tuning.
    pub fn target_rule(&self) -> TargetRule {
        if self.uses_soft_targets() {
            TargetRule::Smoothed { alpha: self.soft.alpha }
        } else {
            TargetRule::OneHot
        }
    }

    pub fn alignment_rule(&self) -> TargetRule {
        if self.soft_in_alignment {
            self.target_rule()
        } else {
            TargetRule::OneHot
        }
    }
}

pub fn build_target_distribution<S: Scalar>(method: &MethodSpec, target: TokenId, vocab: usize) -> Result<Vec<S>> {
    method.target_rule().distribution(target, vocab)
}

//! Label-smoothed training targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{TokenId, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftTargetConfig {
    pub alpha: f64,
}

impl Default for SoftTargetConfig {
    fn default() -> Self {
        Self { alpha: 0.01 }
    }
}

impl SoftTargetConfig {
    /// `0 < α < 1 - 1/N` keeps the target the strict argmax.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let a = self.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("soft-target alpha {a} outside (0, 1)")));
        }
        if a >= 1.0 - 1.0 / vocab as f64 {
            return Err(Error::Config(format!("soft-target alpha {a} would not keep the target as argmax")));
        }
        Ok(())
    }
}

/// `1 - α` at the target, `α / (N - 1)` everywhere else.
pub fn smooth_targets<S: Scalar>(target: TokenId, vocab: usize, alpha: f64) -> Result<Vec<S>> {
    if target == PAD {
        return Err(Error::InvalidArgument("padding positions are never smoothed".into()));
    }
    if target as usize >= vocab || vocab < 2 {
        return Err(Error::InvalidArgument(format!("target {target} outside vocabulary of {vocab}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut q = vec![S::of(alpha / (vocab - 1) as f64); vocab];
    q[target as usize] = S::of(1.0 - alpha);
    Ok(q)
}

pub fn one_hot<S: Scalar>(target: TokenId, vocab: usize) -> Result<Vec<S>> {
    if target as usize >= vocab {
        return Err(Error::InvalidArgument(format!("target {target} outside vocabulary of {vocab}")));
    }
    let mut q = vec![S::zero(); vocab];
    q[target as usize] = S::one();
    Ok(q)
}

/// How training targets are turned into distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetRule {
    OneHot,
    Smoothed { alpha: f64 },
}

impl TargetRule {
    pub fn distribution<S: Scalar>(self, target: TokenId, vocab: usize) -> Result<Vec<S>> {
        match self {
            TargetRule::OneHot => one_hot(target, vocab),
            TargetRule::Smoothed { alpha } => smooth_targets(target, vocab, alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let q: Vec<f64> = smooth_targets(2, 4, 0.01).unwrap();
        let off = 0.01 / 3.0;
        assert_eq!(q, vec![off, off, 0.99, off]);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pad_target_rejected() {
        assert!(smooth_targets::<f64>(PAD, 16, 0.1).is_err());
        assert!(smooth_targets::<f64>(20, 16, 0.1).is_err());
        assert!(smooth_targets::<f64>(3, 16, 1.0).is_err());
    }

    #[test]
    fn argmax_guard() {
        assert!(SoftTargetConfig { alpha: 0.01 }.validate(256).is_ok());
        assert!(SoftTargetConfig { alpha: 0.8 }.validate(4).is_err());
        assert!(SoftTargetConfig { alpha: 0.0 }.validate(256).is_err());
    }
}

//! Low-rank adapters on the LLM's linear layers.
//!
//! Adapters are stored input-major like the base weights: `a` is `in x r`
//! and `b` is `r x out`, so the adapted map is `x·W + γ·(x·a)·b`, the
//! transpose of the usual `W + γ·B·A` with `A: r x in`, `B: out x r`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockLinear, Component, LinearSlot, Parameters};
use crate::rng::{normal, rng_for};
use crate::scalar::Scalar;
use crate::tensor::{axpy, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    /// Fraction of each target's `min(in, out)`.
    Fraction(f64),
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    AllLinear,
    AttentionKqv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: RankSpec,
    pub alpha: f64,
    pub rank_stabilized: bool,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    /// Half of full rank with rank-stabilized scaling on every LLM linear.
    fn default() -> Self {
        Self { rank: RankSpec::Fraction(0.5), alpha: 8.0, rank_stabilized: true, targets: LoraTargets::AllLinear }
    }
}

impl LoraConfig {
    pub fn rank_for(&self, fan_in: usize, fan_out: usize) -> Result<usize> {
        let full = fan_in.min(fan_out);
        let r = match self.rank {
            RankSpec::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("LoRA rank fraction {f} outside (0, 1]")));
                }
                ((full as f64) * f).floor() as usize
            }
            RankSpec::Explicit(r) => r,
        };
        if r == 0 || r > full {
            return Err(Error::Config(format!("LoRA rank {r} outside [1, {full}] for a {fan_in}x{fan_out} layer")));
        }
        Ok(r)
    }

    /// `α/r`, or `α/√r` when rank-stabilized.
    pub fn scale(&self, rank: usize) -> f64 {
        if self.rank_stabilized {
            self.alpha / (rank as f64).sqrt()
        } else {
            self.alpha / rank as f64
        }
    }

    pub fn slots(&self, layers: usize) -> Vec<LinearSlot> {
        let per_block: &[BlockLinear] = match self.targets {
            LoraTargets::AllLinear => &BlockLinear::ALL,
            LoraTargets::AttentionKqv => &[BlockLinear::Q, BlockLinear::K, BlockLinear::V],
        };
        let mut slots: Vec<LinearSlot> =
            (0..layers).flat_map(|i| per_block.iter().map(move |&l| LinearSlot::Block(i, l))).collect();
        if self.targets == LoraTargets::AllLinear {
            slots.push(LinearSlot::LmHead);
        }
        slots
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
    pub scale: S,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// Adapters attached to one parameter set. Merging consumes the set, so a
/// second merge of the same adapters does not type-check:
///
/// ```compile_fail
/// use mmcl::mitigation::{lora_attach, lora_merge, LoraConfig};
/// use mmcl::model::{init_parameters, ModelConfig};
/// let p = init_parameters::<f64>(&ModelConfig::default(), 0).unwrap();
/// let ad = lora_attach(&p, &LoraConfig::default(), 1).unwrap();
/// let p = lora_merge(p, ad).unwrap();
/// let p = lora_merge(p, ad).unwrap();
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<S> {
    pub config: LoraConfig,
    pub adapters: BTreeMap<LinearSlot, LoraAdapter<S>>,
    /// Fingerprint of the base LLM at attach time.
    pub base_fingerprint: String,
}

pub fn lora_attach<S: Scalar>(params: &Parameters<S>, config: &LoraConfig, seed: u64) -> Result<AdapterSet<S>> {
    let mut rng = rng_for(seed, "lora.attach");
    let mut adapters = BTreeMap::new();
    for slot in config.slots(params.blocks.len()) {
        let lin = params
            .linear(slot)
            .ok_or_else(|| Error::AdapterMismatch(format!("no layer {}", slot.name())))?;
        let (fan_in, fan_out) = (lin.fan_in(), lin.fan_out());
        let r = config.rank_for(fan_in, fan_out)?;
        let std = 1.0 / (fan_in as f64).sqrt();
        let a = Matrix::from_vec(fan_in, r, (0..fan_in * r).map(|_| normal(&mut rng, std)).collect());
        let b = Matrix::zeros(r, fan_out);
        adapters.insert(slot, LoraAdapter { a, b, scale: S::of(config.scale(r)) });
    }
    Ok(AdapterSet { config: *config, adapters, base_fingerprint: params.fingerprint(&Component::LLM) })
}

/// Folds `γ·a·b` into each target weight.
pub fn lora_merge<S: Scalar>(mut params: Parameters<S>, set: AdapterSet<S>) -> Result<Parameters<S>> {
    if params.fingerprint(&Component::LLM) != set.base_fingerprint {
        return Err(Error::AdapterMismatch("adapters were attached to different base weights".into()));
    }
    for (slot, ad) in &set.adapters {
        let lin = params
            .linear_mut(*slot)
            .ok_or_else(|| Error::AdapterMismatch(format!("no layer {}", slot.name())))?;
        if ad.a.rows() != lin.fan_in() || ad.b.cols() != lin.fan_out() || ad.a.cols() != ad.b.rows() {
            return Err(Error::AdapterMismatch(format!("shape of adapter for {}", slot.name())));
        }
        let delta = ad.a.matmul(&ad.b);
        axpy(ad.scale, delta.as_slice(), lin.weight.as_mut_slice());
    }
    Ok(params)
}

impl<S: Scalar> AdapterSet<S> {
    pub fn get(&self, slot: LinearSlot) -> Option<&LoraAdapter<S>> {
        self.adapters.get(&slot)
    }

    pub fn zeros_like(&self) -> Self {
        let adapters = self
            .adapters
            .iter()
            .map(|(k, a)| (*k, LoraAdapter { a: a.a.zeros_like(), b: a.b.zeros_like(), scale: a.scale }))
            .collect();
        Self { config: self.config, adapters, base_fingerprint: self.base_fingerprint.clone() }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix<S>)) {
        for (slot, ad) in &self.adapters {
            let name = slot.name();
            f(&format!("lora.{name}.a"), &ad.a);
            f(&format!("lora.{name}.b"), &ad.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>)) {
        for (slot, ad) in self.adapters.iter_mut() {
            let name = slot.name();
            f(&format!("lora.{name}.a"), &mut ad.a);
            f(&format!("lora.{name}.b"), &mut ad.b);
        }
    }

    pub fn count(&self) -> usize {
        self.adapters.values().map(|a| a.a.as_slice().len() + a.b.as_slice().len()).sum()
    }
}

use std::collections::BTreeMap;

use super::forward::{assemble_sequence, backward, forward_cached, Grads};
use super::loss::loss_and_grad;
use super::params::{Parameters, TrainabilityMask};
use crate::error::{Error, Result};
use crate::mitigation::{AdapterSet, TargetRule};
use crate::scalar::Scalar;
use crate::synthdata::Sample;
use crate::tensor::Matrix;

/// Named gradients of every trainable tensor; frozen tensors are absent.
pub type GradientMap<S> = BTreeMap<String, Matrix<S>>;

/// Adds `weight · ∇ loss(sample)` into `grads` and returns the sample loss.
pub fn accumulate_sample<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    sample: &Sample,
    mask: &TrainabilityMask,
    rule: TargetRule,
    weight: S,
    grads: &mut Grads<S>,
) -> Result<S> {
    let asm = assemble_sequence(params, sample)?;
    let selected: Vec<usize> = (0..asm.targets.len()).filter(|&j| asm.loss_mask[j]).collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument("sample has no supervised target positions".into()));
    }
    let rows: Vec<usize> = selected.iter().map(|&j| asm.target_positions[j]).collect();
    let (logits, cache) = forward_cached(params, adapters, &asm.embeddings, Some(&rows))?;
    let n = params.config.vocab;
    let q = selected
        .iter()
        .map(|&j| rule.distribution::<S>(asm.targets[j], n))
        .collect::<Result<Vec<_>>>()?;
    let (l, dlogits) = loss_and_grad(&logits, &q, &vec![true; rows.len()], weight)?;
    backward(params, adapters, &asm, &cache, &dlogits, mask, grads)?;
    Ok(l)
}

/// Mean batch loss and its gradient, accumulated in batch order.
pub fn batch_gradients<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    batch: &[&Sample],
    mask: &TrainabilityMask,
    rule: TargetRule,
) -> Result<(S, Grads<S>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = Grads::zeros(params, adapters);
    let w = S::one() / S::of(batch.len() as f64);
    let mut total = S::zero();
    for s in batch {
        total += accumulate_sample(params, adapters, s, mask, rule, w, &mut grads)?;
    }
    Ok((total * w, grads))
}

impl<S: Scalar> Grads<S> {
    /// Gradient map restricted to what `mask` trains.
    pub fn to_map(&self, mask: &TrainabilityMask) -> Result<GradientMap<S>> {
        let mut out = BTreeMap::new();
        let mut bad = None;
        self.params.visit(&mut |name, c, t| {
            if mask.trains(c) {
                if !t.is_finite() {
                    bad.get_or_insert_with(|| name.to_string());
                }
                out.insert(name.to_string(), t.clone());
            }
        });
        if mask.adapters {
            if let Some(a) = &self.adapters {
                a.visit(&mut |name, t| {
                    if !t.is_finite() {
                        bad.get_or_insert_with(|| name.to_string());
                    }
                    out.insert(name.to_string(), t.clone());
                });
            }
        }
        match bad {
            Some(name) => Err(Error::NonFinite { what: format!("gradient of {name}"), step: None }),
            None => Ok(out),
        }
    }
}

/// Exact gradients of the mean batch loss for every trainable tensor.
pub fn gradients<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    batch: &[&Sample],
    mask: &TrainabilityMask,
    rule: TargetRule,
) -> Result<(S, GradientMap<S>)> {
    let (l, g) = batch_gradients(params, adapters, batch, mask, rule)?;
    Ok((l, g.to_map(mask)?))
}

/// Mean per-sample loss without gradients.
pub fn mean_loss<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    samples: &[Sample],
    rule: TargetRule,
) -> Result<S> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = S::zero();
    for s in samples {
        let asm = assemble_sequence(params, s)?;
        let selected: Vec<usize> = (0..asm.targets.len()).filter(|&j| asm.loss_mask[j]).collect();
        let rows: Vec<usize> = selected.iter().map(|&j| asm.target_positions[j]).collect();
        let (logits, _) = forward_cached(params, adapters, &asm.embeddings, Some(&rows))?;
        let q = selected
            .iter()
            .map(|&j| rule.distribution::<S>(asm.targets[j], params.config.vocab))
            .collect::<Result<Vec<_>>>()?;
        total += super::loss::loss(&logits, &q, &vec![true; rows.len()])?;
    }
    Ok(total / S::of(samples.len() as f64))
}

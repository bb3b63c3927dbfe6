use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{AdamConfig, StageConfig};
use crate::error::{Error, Result};
use crate::mitigation::AdapterSet;
use crate::model::{GradientMap, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Adam moments per trainable tensor. Frozen tensors never get an entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<S> {
    pub step: u64,
    pub first: BTreeMap<String, Matrix<S>>,
    pub second: BTreeMap<String, Matrix<S>>,
}

impl<S> Default for OptimizerState<S> {
    fn default() -> Self {
        Self { step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        Self::default()
    }

    fn update(&mut self, name: &str, param: &mut Matrix<S>, grad: &Matrix<S>, lr: f64, scale: S, cfg: &AdamConfig) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!("gradient of {name} is {:?}, tensor is {:?}", grad.shape(), param.shape())));
        }
        let m = self.first.entry(name.to_string()).or_insert_with(|| param.zeros_like());
        let v = self.second.entry(name.to_string()).or_insert_with(|| param.zeros_like());
        let t = self.step as i32;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::of(1.0 - cfg.beta1.powi(t));
        let c2 = S::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps, wd) = (S::of(lr), S::of(cfg.eps), S::of(cfg.weight_decay));
        let (one, p, ms, vs) = (S::one(), param.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
        for (((w, &g), mi), vi) in p.iter_mut().zip(grad.as_slice()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
            let g = g * scale;
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            let next = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            if !next.is_finite() {
                return Err(Error::NonFinite { what: format!("update of {name}"), step: Some(self.step as usize) });
            }
            *w = next;
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<S: Scalar>(grads: &GradientMap<S>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.as_slice().iter())
        .map(|v| {
            let x = v.to_f64_exact();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One Adam step with bias correction over exactly the tensors in `grads`.
pub fn optimizer_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut Parameters<S>,
    adapters: Option<&mut AdapterSet<S>>,
    grads: &GradientMap<S>,
    lr: f64,
    cfg: &StageConfig,
) -> Result<()> {
    let c = cfg.grad_clip;
    let scale = if c > 0.0 {
        let n = global_norm(grads);
        if !n.is_finite() {
            return Err(Error::NonFinite { what: "gradient norm".into(), step: Some(state.step as usize) });
        }
        if n > c {
            S::of(c / n)
        } else {
            S::one()
        }
    } else {
        S::one()
    };
    state.step += 1;
    let mut seen = 0usize;
    let mut result = Ok(());
    params.visit_mut(&mut |name, _, t| {
        if let (Some(g), true) = (grads.get(name), result.is_ok()) {
            seen += 1;
            result = state.update(name, t, g, lr, scale, &cfg.optimizer);
        }
    });
    if let Some(ad) = adapters {
        ad.visit_mut(&mut |name, t| {
            if let (Some(g), true) = (grads.get(name), result.is_ok()) {
                seen += 1;
                result = state.update(name, t, g, lr, scale, &cfg.optimizer);
            }
        });
    }
    result?;
    if seen != grads.len() {
        return Err(Error::InvalidArgument("gradients name tensors that are not present".into()));
    }
    Ok(())
}

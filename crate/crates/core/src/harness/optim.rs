//! AdamW with decoupled weight decay, linear learning-rate warmup scaled
//! by batch size, and an EMA shadow of the trainable parameters.

use crate::autodiff::{Binding, Grads, ParamSet};
use crate::error::{D2cError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    /// Base learning rate per `ref_batch` samples.
    pub base_lr: f64,
    pub ref_batch: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 5e-5,
            ref_batch: 256.0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.02,
            ema_momentum: 0.9999,
            warmup_fraction: 0.125,
        }
    }
}

impl OptimConfig {
    /// Post-warmup learning rate for a given batch size.
    pub fn scaled_lr(&self, batch_size: usize) -> f64 {
        self.base_lr * batch_size as f64 / self.ref_batch
    }

    /// Learning rate at `step` (0-based) of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize, batch_size: usize) -> f64 {
        let warmup = ((total_steps as f64 * self.warmup_fraction).ceil() as usize).max(1);
        let factor = ((step + 1) as f64 / warmup as f64).min(1.0);
        self.scaled_lr(batch_size) * factor
    }
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: &OptimConfig) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update over every trainable parameter. Gradients are looked
    /// up through the binding used for the backward pass; a parameter
    /// disconnected from the loss steps only through weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        binding: &Binding,
        grads: &Grads,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            if !params.get(id).requires_grad() {
                continue;
            }
            let zero;
            let g = match grads.get(binding.id(id)) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; params.get(id).numel()];
                    &zero[..]
                }
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(D2cError::numeric(format!(
                    "non-finite gradient for {}",
                    params.name(id)
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + 1e-8) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the trainable parameters:
/// shadow ← momentum·shadow + (1 − momentum)·param after every step.
pub struct Ema {
    momentum: f64,
    shadow: Vec<Option<Vec<f64>>>,
}

impl Ema {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        let shadow = params
            .ids()
            .map(|id| {
                params
                    .get(id)
                    .requires_grad()
                    .then(|| params.get(id).data().to_vec())
            })
            .collect();
        Ema { momentum, shadow }
    }

    pub fn update(&mut self, params: &ParamSet) {
        for (idx, id) in params.ids().enumerate() {
            if let Some(sh) = &mut self.shadow[idx] {
                for (s, &p) in sh.iter_mut().zip(params.get(id).data()) {
                    *s = self.momentum * *s + (1.0 - self.momentum) * p;
                }
            }
        }
    }

    /// Shadow tensors as (name, tensor) pairs for checkpointing.
    pub fn tensors(&self, params: &ParamSet) -> Vec<(String, crate::autodiff::Tensor)> {
        params
            .ids()
            .enumerate()
            .filter_map(|(idx, id)| {
                self.shadow[idx].as_ref().map(|sh| {
                    let t = crate::autodiff::Tensor::from_raw(
                        params.get(id).shape().to_vec(),
                        sh.clone(),
                    );
                    (params.name(id).to_string(), t)
                })
            })
            .collect()
    }

    /// New ParamSet with trainable entries replaced by their shadows.
    pub fn applied(&self, params: &ParamSet) -> ParamSet {
        let mut out = params.clone();
        for (idx, id) in params.ids().enumerate() {
            if let Some(sh) = &self.shadow[idx] {
                out.get_mut(id).data_mut().copy_from_slice(sh);
            }
        }
        out
    }

    /// Restore shadows from checkpointed tensors.
    pub fn from_tensors(
        params: &ParamSet,
        momentum: f64,
        tensors: &[(String, crate::autodiff::Tensor)],
    ) -> Result<Self> {
        let mut ema = Ema::new(params, momentum);
        for (name, tensor) in tensors {
            let id = params
                .lookup(name)
                .ok_or_else(|| D2cError::format(format!("EMA tensor {name} has no parameter")))?;
            let idx = params.ids().position(|p| p == id).unwrap();
            match &mut ema.shadow[idx] {
                Some(sh) => sh.copy_from_slice(tensor.data()),
                None => {
                    return Err(D2cError::format(format!(
                        "EMA tensor {name} targets a frozen parameter"
                    )))
                }
            }
        }
        Ok(ema)
    }
}

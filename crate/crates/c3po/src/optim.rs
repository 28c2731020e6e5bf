//! Adam with a cosine-decayed learning rate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape};

/// `base · ½ · (1 + cos(π · position))` for `position ∈ [0, 1]`.
pub fn cosine_lr(base: f64, position: f64) -> f64 {
    let p = position.clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (PI * p).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers are keyed by parameter position in the store.
#[derive(Clone, Debug)]
pub struct Adam<E: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<E>>,
    second: Vec<Vec<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(config: AdamConfig, params: &ParamStore<E>) -> Self {
        let zeros = |_| params.iter().map(|(_, t)| vec![E::zero(); t.shape().numel()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently on `params` and
    /// returns the learning rate used. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<E>, schedule_position: f64) -> Result<f64> {
        if params.len() != self.first.len() {
            return Err(Error::Optimizer(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for id in params.ids() {
            match params.get(id).grad() {
                Some(g) => grads.push(g),
                None => {
                    return Err(Error::Optimizer(format!(
                        "parameter {} has no gradient",
                        params.name(id)
                    )))
                }
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let lr = cosine_lr(lr, schedule_position);
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), (m, v)) in ids.into_iter().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let w = params.get(id).data();
            let mut next = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let gi = g[i].to_f64_lossy();
                let mi = beta1 * m[i].to_f64_lossy() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64_lossy() + (1.0 - beta2) * gi * gi;
                m[i] = E::from_f64_lossy(mi);
                v[i] = E::from_f64_lossy(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                next.push(E::from_f64_lossy(w[i].to_f64_lossy() - update));
            }
            params.set(id, next)?;
        }
        Ok(lr)
    }

    /// Moment buffers as `(name, shape, values)` triples for checkpointing.
    pub fn state(&self, params: &ParamStore<E>) -> Vec<(String, Shape, Vec<E>)> {
        let mut out = Vec::new();
        for ((name, t), (m, v)) in params.iter().zip(self.first.iter().zip(&self.second)) {
            out.push((format!("adam.m.{name}"), t.shape(), m.clone()));
            out.push((format!("adam.v.{name}"), t.shape(), v.clone()));
        }
        out
    }

    /// Restores moments saved by [`state`](Self::state) together with the step counter.
    pub fn restore(
        &mut self,
        params: &ParamStore<E>,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<E>>,
    ) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            for (prefix, buf) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("adam.{prefix}.{name}");
                let data = lookup(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {key}")))?;
                if data.len() != t.shape().numel() {
                    return Err(Error::Checkpoint(format!("optimizer entry {key} has wrong size")));
                }
                *buf = data;
            }
        }
        self.step = step;
        Ok(())
    }
}

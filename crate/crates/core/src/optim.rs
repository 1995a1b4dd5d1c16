//! AdamW with decoupled weight decay and the cosine schedules used in training.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Only matrices and higher-rank tensors are decayed; biases, norm scales and
/// the class token are not.
pub fn decays(tensor: &Tensor) -> bool {
    tensor.rank() >= 2
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Grads,
        lr: f32,
        weight_decay: f32,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
            let decay = if decays(p) { weight_decay } else { 0.0 };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = *w * (1.0 - lr * decay) - lr * update;
            }
        }
        Ok(())
    }

    /// Moments as tensors (`adam.m.<name>`, `adam.v.<name>`) plus the step
    /// counter, for checkpointing.
    pub fn state(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in map {
                let shape = params.get(name)?.shape().to_vec();
                out.insert(
                    format!("adam.{kind}.{name}"),
                    Tensor::new(&shape, data.clone())?,
                );
            }
        }
        out.insert("adam.step", Tensor::scalar(self.step as f32));
        Ok(out)
    }

    pub fn from_state(state: &ParamStore) -> Result<Self> {
        let mut opt = Self::default();
        for (name, t) in state.iter() {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                opt.m.insert(rest.to_string(), t.data().to_vec());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                opt.v.insert(rest.to_string(), t.data().to_vec());
            }
        }
        opt.step = state.get("adam.step")?.data()[0] as u64;
        Ok(opt)
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then half-cosine decay
/// to `min` at `total`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base: f64, min: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let progress = (step - warmup) as f64 / span as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}

/// Half-cosine from `start` at step 0 to `end` at `total`.
pub fn cosine(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let progress = step as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * progress).cos())
}

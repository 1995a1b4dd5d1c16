//! Named parameter collections and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Per-parameter gradients keyed like the store they came from.
pub type Grads = BTreeMap<String, Vec<f32>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds (or overwrites with) every entry of `other`.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count differs: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!(
                    "layout mismatch: `{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`; trainable ones track gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.bind_where(tape, |_| trainable)
    }

    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Gradients of every tracked parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Grads {
        self.vars
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// `Σ grads` in key order, then scaled by `scale`.
pub fn sum_grads<'a>(parts: impl IntoIterator<Item = &'a Grads>, scale: f32) -> Grads {
    let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            let slot = total
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (s, &v) in slot.iter_mut().zip(g) {
                *s += f64::from(v);
            }
        }
    }
    total
        .into_iter()
        .map(|(k, v)| {
            let scaled = v
                .into_iter()
                .map(|x| (x * f64::from(scale)) as f32)
                .collect();
            (k, scaled)
        })
        .collect()
}

pub fn global_norm(grads: &Grads) -> f32 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| f64::from(v).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales so the global norm is at most `max_norm`. Returns the norm before
/// clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

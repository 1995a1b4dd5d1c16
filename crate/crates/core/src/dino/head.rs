//! Projection head: three-layer GELU MLP, L2 bottleneck, weight-normalized
//! output layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Number of prototypes `K`.
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            bottleneck: 256,
            out_dim: 1024,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 || self.out_dim < 2 {
            return Err(Error::Config(format!("invalid head dimensions {self:?}")));
        }
        Ok(())
    }
}

pub fn init_head(cfg: &HeadConfig, in_dim: usize, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let dims = [
        (in_dim, cfg.hidden),
        (cfg.hidden, cfg.hidden),
        (cfg.hidden, cfg.bottleneck),
    ];
    for (i, &(a, b)) in dims.iter().enumerate() {
        p.insert(
            format!("head.mlp{}", i + 1),
            Tensor::trunc_normal(&[a, b], INIT_STD, rng),
        );
        p.insert(format!("head.mlp{}.bias", i + 1), Tensor::zeros(&[b]));
    }
    p.insert(
        "head.last",
        Tensor::trunc_normal(&[cfg.bottleneck, cfg.out_dim], INIT_STD, rng),
    );
    Ok(p)
}

/// Maps `[V, D]` features to `[V, K]` logits.
pub fn head_forward(tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 1..=3 {
        let w = bound.get(&format!("head.mlp{i}"))?;
        let b = bound.get(&format!("head.mlp{i}.bias"))?;
        h = tape.linear(h, w, Some(b))?;
        if i < 3 {
            h = tape.gelu(h);
        }
    }
    let h = tape.l2_normalize(h, NORM_EPS);
    // unit-norm prototype columns
    let last = bound.get("head.last")?;
    let rows = tape.transpose(last)?;
    let rows = tape.l2_normalize(rows, NORM_EPS);
    let cols = tape.transpose(rows)?;
    tape.matmul(h, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn logits_are_cosines() {
        let cfg = HeadConfig {
            hidden: 16,
            bottleneck: 8,
            out_dim: 5,
        };
        let p = init_head(&cfg, 6, &mut rng::seeded(0)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let x = tape.constant(Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng::seeded(1)));
        let y = head_forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 5]);
        assert!(tape.data(y).iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }
}

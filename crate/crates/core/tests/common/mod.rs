#![allow(dead_code)]

use nvk_core::autodiff::{Tape, Var};
use nvk_core::backbone::BackboneConfig;
use nvk_core::data::synth;
use nvk_core::dino::{DinoConfig, HeadConfig};
use nvk_core::params::{Bound, ParamStore};
use nvk_core::rng::{self, Rng};
use nvk_core::tensor::Tensor;
use nvk_core::vit::VitConfig;
use nvk_core::Result;
use rand::Rng as _;

/// Gradients smaller than this are compared absolutely (at `rel · FLOOR`).
pub const FD_FLOOR: f64 = 1e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compares tape gradients of `loss` with central differences at up to
/// `per_tensor` random coordinates of every tensor in `params`. Returns the
/// worst coordinate and the number of coordinates checked.
pub fn grad_check(
    params: &ParamStore,
    loss: impl Fn(&mut Tape, &Bound) -> Result<Var>,
    per_tensor: usize,
    step: f32,
    rng: &mut Rng,
) -> (Worst, usize) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let l = loss(&mut tape, &bound).unwrap();
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape);
    let eval = |p: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let v = loss(&mut t, &b).unwrap();
        f64::from(t.data(v)[0])
    };
    let mut worst = Worst {
        name: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel: -1.0,
    };
    let mut checked = 0;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = t.data()[i];
            let mut at = |delta: f32| {
                probe.get_mut(name).unwrap().data_mut()[i] = orig + delta;
                let v = eval(&probe);
                // actual offset after f32 rounding
                (v, f64::from(orig + delta) - f64::from(orig))
            };
            let ((u1, h1), (d1, g1)) = (at(step), at(-step));
            let ((u2, h2), (d2, g2)) = (at(2.0 * step), at(-2.0 * step));
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            // Richardson combination of two central differences, O(h^4) truncation
            let (near, far) = ((u1 - d1) / (h1 - g1), (u2 - d2) / (h2 - g2));
            let numeric = (4.0 * near - far) / 3.0;
            let analytic = grads.get(name).map_or(0.0, |g| f64::from(g[i]));
            let rel = rel_err(analytic, numeric);
            checked += 1;
            if rel > worst.rel {
                worst = Worst {
                    name: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel,
                };
            }
        }
    }
    (worst, checked)
}

/// Scalar probe loss `Σ w ⊙ cls` with fixed random weights.
pub fn cls_probe_loss(
    cfg: &BackboneConfig,
    image: &Tensor,
    weights: &Tensor,
) -> impl Fn(&mut Tape, &Bound) -> Result<Var> {
    let cfg = cfg.clone();
    let image = image.clone();
    let weights = weights.clone();
    move |tape, bound| {
        let out = cfg.forward(tape, bound, &image)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out.cls, w)?;
        Ok(tape.sum(prod))
    }
}

/// Toy self-distillation setup: tiny ViT on 32×32 gratings, K = 64.
pub struct ToyDino {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub cfg: DinoConfig,
    pub images: Vec<Tensor>,
}

pub const TOY_K: usize = 64;
pub const TOY_IMAGES: usize = 64;
pub const TOY_BATCH: usize = 16;

pub fn toy_dino(steps: usize, centering: bool, seed: u64) -> ToyDino {
    let mut r = rng::seeded(5);
    let images = (0..TOY_IMAGES)
        .map(|_| synth::grating_image(32, 32, &mut r))
        .collect();
    let per_epoch = TOY_IMAGES / TOY_BATCH;
    let cfg = DinoConfig {
        epochs: steps.div_ceil(per_epoch),
        lr: 1e-3,
        min_lr: 1e-6,
        warmup_epochs: 10,
        batch_size: TOY_BATCH,
        global_crop_size: 32,
        local_crop_size: 16,
        n_local_crops: 4,
        momentum_teacher: 0.97,
        centering,
        checkpoint_every: 25,
        seed,
        ..DinoConfig::vit_small()
    };
    ToyDino {
        backbone: BackboneConfig::Vit(VitConfig::tiny(32, 8, 32, 2, 4)),
        head: HeadConfig {
            hidden: 64,
            bottleneck: 256,
            out_dim: TOY_K,
        },
        cfg,
        images,
    }
}

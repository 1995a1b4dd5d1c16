//! Bidirectional selective state-space backbone.
//!
//! Each block normalizes its input, projects it into a signal and a gate
//! branch, runs the selective scan over the signal in both sequence orders,
//! sums the two directions, gates with `SiLU(gate)`, projects back and adds
//! the residual. The class token sits in the middle of the sequence.
//!
//! Per-direction parameters carry a `.fwd` / `.bwd` suffix; parameters live
//! under `vim.`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inverse, Tape, Var};
use crate::embed::{embed_tokens, TokenLayout};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;
const LN_EPS: f32 = 1e-5;
const CONV_WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VimConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    #[serde(default = "default_state")]
    pub state_size: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    /// Short causal depthwise convolution on the signal branch. Off by default.
    #[serde(default)]
    pub depthwise_conv: bool,
}

fn default_channels() -> usize {
    3
}

fn default_state() -> usize {
    16
}

fn default_expand() -> usize {
    2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub fn suffix(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

impl VimConfig {
    pub fn tiny(image: usize, patch: usize, embed_dim: usize, depth: usize, state: usize) -> Self {
        Self {
            image_height: image,
            image_width: image,
            patch_size: patch,
            channels: 3,
            embed_dim,
            depth,
            state_size: state,
            expand: 2,
            depthwise_conv: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.state_size == 0 || self.expand == 0 || self.channels == 0 {
            return Err(Error::Config(
                "embed_dim, state_size, expand and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.embed_dim * self.expand
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Index of the class token in the native sequence, `⌊J/2⌋`.
    pub fn cls_index(&self) -> usize {
        self.num_patches() / 2
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            patch: self.patch_size,
            native_grid: self.grid(),
            native_cls_index: self.cls_index(),
            cls_at_middle: true,
        }
    }
}

pub fn layer_key(i: usize, part: &str) -> String {
    format!("vim.layer{i}.{part}")
}

pub fn dir_key(i: usize, part: &str, dir: Direction) -> String {
    format!("vim.layer{i}.{part}.{}", dir.suffix())
}

pub fn init_params(cfg: &VimConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let di = cfg.inner_dim();
    let ns = cfg.state_size;
    let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
    let mut p = ParamStore::new();
    p.insert(
        "vim.patch_proj",
        Tensor::trunc_normal(&[patch_dim, d], INIT_STD, rng),
    );
    p.insert(
        "vim.pos",
        Tensor::trunc_normal(&[cfg.num_patches() + 1, d], INIT_STD, rng),
    );
    p.insert("vim.cls", Tensor::trunc_normal(&[d], INIT_STD, rng));
    for i in 0..cfg.depth {
        p.insert(layer_key(i, "norm"), Tensor::ones(&[d]));
        p.insert(layer_key(i, "norm.bias"), Tensor::zeros(&[d]));
        p.insert(
            layer_key(i, "in"),
            Tensor::trunc_normal(&[d, 2 * di], INIT_STD, rng),
        );
        p.insert(
            layer_key(i, "out"),
            Tensor::trunc_normal(&[di, d], INIT_STD, rng),
        );
        for dir in Direction::BOTH {
            // S4D-real initialization: A[d, n] = -(n + 1)
            let a_log = (0..di)
                .flat_map(|_| (1..=ns).map(|n| (n as f32).ln()))
                .collect();
            p.insert(dir_key(i, "a_log", dir), Tensor::new(&[di, ns], a_log)?);
            p.insert(
                dir_key(i, "dproj", dir),
                Tensor::trunc_normal(&[di, di], INIT_STD, rng),
            );
            // step sizes log-uniform in [1e-3, 1e-1] at initialization
            let dbias = (0..di)
                .map(|_| {
                    let dt = rng::uniform_f64(rng, (1e-3f64).ln(), (1e-1f64).ln()).exp();
                    softplus_inverse(dt as f32)
                })
                .collect();
            p.insert(dir_key(i, "dbias", dir), Tensor::new(&[di], dbias)?);
            p.insert(
                dir_key(i, "bproj", dir),
                Tensor::trunc_normal(&[di, ns], INIT_STD, rng),
            );
            p.insert(
                dir_key(i, "cproj", dir),
                Tensor::trunc_normal(&[di, ns], INIT_STD, rng),
            );
            if cfg.depthwise_conv {
                p.insert(
                    dir_key(i, "conv", dir),
                    Tensor::trunc_normal(&[CONV_WIDTH, di], 0.5, rng),
                );
                p.insert(dir_key(i, "conv.bias", dir), Tensor::zeros(&[di]));
            }
        }
    }
    Ok(p)
}

/// Tape handles of one scan direction.
#[derive(Clone, Copy, Debug)]
pub struct SsmDirectionParams {
    pub a_log: Var,
    pub dproj: Var,
    pub dbias: Var,
    pub bproj: Var,
    pub cproj: Var,
    pub conv: Option<(Var, Var)>,
}

impl SsmDirectionParams {
    pub fn lookup(bound: &Bound, layer: usize, dir: Direction, conv: bool) -> Result<Self> {
        let g = |part: &str| bound.get(&dir_key(layer, part, dir));
        Ok(Self {
            a_log: g("a_log")?,
            dproj: g("dproj")?,
            dbias: g("dbias")?,
            bproj: g("bproj")?,
            cproj: g("cproj")?,
            conv: if conv {
                Some((g("conv")?, g("conv.bias")?))
            } else {
                None
            },
        })
    }
}

/// Selective scan of `signal: [L, D_inner]` in sequence order with
/// input-dependent `Δ = softplus(signal·W_Δ + b_Δ)`, `B = signal·W_B`,
/// `C = signal·W_C` and `A = −exp(A_log)`.
pub fn directional_scan(tape: &mut Tape, signal: Var, p: &SsmDirectionParams) -> Result<Var> {
    let signal = match p.conv {
        Some((w, b)) => causal_depthwise_conv(tape, signal, w, b)?,
        None => signal,
    };
    let raw = tape.linear(signal, p.dproj, Some(p.dbias))?;
    let delta = tape.softplus(raw);
    let b = tape.matmul(signal, p.bproj)?;
    let c = tape.matmul(signal, p.cproj)?;
    let a = tape.exp(p.a_log);
    let a = tape.neg(a);
    tape.selective_scan(signal, delta, a, b, c)
}

fn causal_depthwise_conv(tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
    let (len, ch) = (tape.shape(x)[0], tape.shape(x)[1]);
    let width = tape.shape(w)[0];
    let pad = tape.constant(Tensor::zeros(&[width - 1, ch]));
    let padded = tape.concat(&[pad, x], 0)?;
    let mut acc: Option<Var> = None;
    for k in 0..width {
        let shifted = tape.slice(padded, 0, k, len)?;
        let wk = tape.slice(w, 0, k, 1)?;
        let wk = tape.reshape(wk, &[ch])?;
        let term = tape.mul_bias(shifted, wk)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let y = tape.add_bias(acc.expect("width >= 1"), bias)?;
    Ok(tape.silu(y))
}

/// One residual bidirectional block on `x: [L, D]`.
pub fn bidirectional_block(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &VimConfig,
    layer: usize,
    x: Var,
) -> Result<Var> {
    let di = cfg.inner_dim();
    let g = |part: &str| bound.get(&layer_key(layer, part));
    let h = tape.layer_norm(x, g("norm")?, g("norm.bias")?, LN_EPS)?;
    let xz = tape.matmul(h, g("in")?)?;
    let signal = tape.slice(xz, 1, 0, di)?;
    let gate = tape.slice(xz, 1, di, di)?;

    let fwd = SsmDirectionParams::lookup(bound, layer, Direction::Forward, cfg.depthwise_conv)?;
    let bwd = SsmDirectionParams::lookup(bound, layer, Direction::Backward, cfg.depthwise_conv)?;
    let y_fwd = directional_scan(tape, signal, &fwd)?;
    let reversed = tape.reverse_rows(signal)?;
    let y_bwd = directional_scan(tape, reversed, &bwd)?;
    let y_bwd = tape.reverse_rows(y_bwd)?;

    let merged = tape.add(y_fwd, y_bwd)?;
    let gate = tape.silu(gate);
    let gated = tape.mul(merged, gate)?;
    let out = tape.matmul(gated, g("out")?)?;
    tape.add(x, out)
}

pub fn patch_embed(tape: &mut Tape, bound: &Bound, cfg: &VimConfig, image: &Tensor) -> Result<Var> {
    let s = image.shape();
    if s.len() != 3 || s[2] != cfg.channels {
        return Err(Error::Config(format!(
            "expected an [H, W, {}] image, got {s:?}",
            cfg.channels
        )));
    }
    embed_tokens(
        tape,
        &cfg.layout(),
        bound.get("vim.patch_proj")?,
        bound.get("vim.cls")?,
        bound.get("vim.pos")?,
        image,
    )
}

pub struct VimOutput {
    /// Class-token row of the final layer, `[D]`.
    pub cls: Var,
    pub tokens: Var,
    pub cls_index: usize,
}

pub fn vim_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &VimConfig,
    image: &Tensor,
) -> Result<VimOutput> {
    let mut x = patch_embed(tape, bound, cfg, image)?;
    let patches = tape.shape(x)[0] - 1;
    let cls_index = cfg.layout().cls_index(patches);
    for i in 0..cfg.depth {
        x = bidirectional_block(tape, bound, cfg, i, x)?;
        if !tape.value(x).is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite activations after vim layer {i}"
            )));
        }
    }
    let cls = tape.slice(x, 0, cls_index, 1)?;
    let cls = tape.reshape(cls, &[cfg.embed_dim])?;
    Ok(VimOutput {
        cls,
        tokens: x,
        cls_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tied(params: &mut ParamStore, depth: usize) {
        for i in 0..depth {
            for part in ["a_log", "dproj", "dbias", "bproj", "cproj"] {
                let f = params
                    .get(&dir_key(i, part, Direction::Forward))
                    .unwrap()
                    .clone();
                params.insert(dir_key(i, part, Direction::Backward), f);
            }
        }
    }

    fn run_block(params: &ParamStore, cfg: &VimConfig, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bidirectional_block(&mut tape, &bound, cfg, 0, xv).unwrap();
        tape.value(y).clone()
    }

    fn scaled(cfg: &VimConfig, seed: u64) -> ParamStore {
        let mut p = init_params(cfg, &mut rng::seeded(seed)).unwrap();
        // larger weights so the scan contributes visibly
        for (name, t) in p.iter_mut() {
            if name.ends_with("proj.fwd")
                || name.ends_with("proj.bwd")
                || name.ends_with(".in")
                || name.ends_with(".out")
            {
                for v in t.data_mut() {
                    *v *= 20.0;
                }
            }
        }
        p
    }

    #[test]
    fn cls_index_is_middle() {
        let cfg = VimConfig::tiny(32, 8, 8, 0, 2);
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.cls_index(), 8);
    }

    #[test]
    fn depth_zero_cls_is_token_plus_position() {
        let cfg = VimConfig::tiny(32, 8, 8, 0, 2);
        let params = init_params(&cfg, &mut rng::seeded(1)).unwrap();
        let img = Tensor::uniform(&[32, 32, 3], 0.0, 1.0, &mut rng::seeded(2));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let out = vim_forward(&mut tape, &bound, &cfg, &img).unwrap();
        assert_eq!(out.cls_index, 8);
        assert_eq!(tape.shape(out.tokens), &[17, 8]);
        let cls = params.get("vim.cls").unwrap().data();
        let pos = params.get("vim.pos").unwrap().row(8);
        for ((got, c), p) in tape.data(out.cls).iter().zip(cls).zip(pos) {
            assert_eq!(*got, c + p);
        }
    }

    #[test]
    fn palindromic_input_stays_palindromic() {
        let cfg = VimConfig::tiny(8, 4, 6, 1, 3);
        let mut params = scaled(&cfg, 3);
        tied(&mut params, 1);
        let mut r = rng::seeded(4);
        let half: Vec<Vec<f32>> = (0..3)
            .map(|_| Tensor::randn(&[6], 1.0, &mut r).into_data())
            .collect();
        let mut rows = half.clone();
        rows.push(Tensor::randn(&[6], 1.0, &mut r).into_data());
        rows.extend(half.into_iter().rev());
        let x = Tensor::from_rows(&rows).unwrap();
        let y = run_block(&params, &cfg, &x);
        for t in 0..7 {
            for (a, b) in y.row(t).iter().zip(y.row(6 - t)) {
                assert!((a - b).abs() < 1e-5, "row {t}");
            }
        }
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_output() {
        let cfg = VimConfig::tiny(8, 4, 6, 1, 3);
        let params = scaled(&cfg, 5);
        let mut swapped = params.clone();
        for part in ["a_log", "dproj", "dbias", "bproj", "cproj"] {
            let f = params
                .get(&dir_key(0, part, Direction::Forward))
                .unwrap()
                .clone();
            let b = params
                .get(&dir_key(0, part, Direction::Backward))
                .unwrap()
                .clone();
            swapped.insert(dir_key(0, part, Direction::Forward), b);
            swapped.insert(dir_key(0, part, Direction::Backward), f);
        }
        let x = Tensor::randn(&[7, 6], 1.0, &mut rng::seeded(6));
        let rev_rows: Vec<Vec<f32>> = (0..7).rev().map(|t| x.row(t).to_vec()).collect();
        let x_rev = Tensor::from_rows(&rev_rows).unwrap();
        let y = run_block(&params, &cfg, &x);
        let y_rev = run_block(&swapped, &cfg, &x_rev);
        for t in 0..7 {
            for (a, b) in y.row(t).iter().zip(y_rev.row(6 - t)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn optional_conv_runs() {
        let mut cfg = VimConfig::tiny(8, 4, 4, 1, 2);
        cfg.depthwise_conv = true;
        let params = init_params(&cfg, &mut rng::seeded(8)).unwrap();
        assert!(params.contains("vim.layer0.conv.fwd"));
        let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng::seeded(9));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let out = vim_forward(&mut tape, &bound, &cfg, &img).unwrap();
        let loss = tape.sum(out.cls);
        tape.backward(loss).unwrap();
        assert!(bound.grads(&tape)["vim.layer0.conv.fwd"]
            .iter()
            .any(|&g| g != 0.0));
    }
}

//! Vision Transformer backbone.
//!
//! Pre-norm blocks (`x + MSA(LN(x))`, then `x + MLP(LN(x))`) over a token
//! sequence with the class token at the front. Parameters live under `vit.`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embed::{embed_tokens, TokenLayout};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl VitConfig {
    pub fn tiny(image: usize, patch: usize, embed_dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            image_height: image,
            image_width: image,
            patch_size: patch,
            channels: 3,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
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
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "channels and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
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

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            patch: self.patch_size,
            native_grid: self.grid(),
            native_cls_index: 0,
            cls_at_middle: false,
        }
    }
}

fn layer_key(i: usize, part: &str) -> String {
    format!("vit.layer{i}.{part}")
}

pub fn init_params(cfg: &VitConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
    let mut p = ParamStore::new();
    p.insert(
        "vit.patch_proj",
        Tensor::trunc_normal(&[patch_dim, d], INIT_STD, rng),
    );
    p.insert(
        "vit.pos",
        Tensor::trunc_normal(&[cfg.num_patches() + 1, d], INIT_STD, rng),
    );
    p.insert("vit.cls", Tensor::trunc_normal(&[d], INIT_STD, rng));
    for i in 0..cfg.depth {
        p.insert(layer_key(i, "norm1"), Tensor::ones(&[d]));
        p.insert(layer_key(i, "norm1.bias"), Tensor::zeros(&[d]));
        p.insert(
            layer_key(i, "wqkv"),
            Tensor::trunc_normal(&[d, 3 * d], INIT_STD, rng),
        );
        p.insert(
            layer_key(i, "wmsa"),
            Tensor::trunc_normal(&[d, d], INIT_STD, rng),
        );
        p.insert(layer_key(i, "norm2"), Tensor::ones(&[d]));
        p.insert(layer_key(i, "norm2.bias"), Tensor::zeros(&[d]));
        p.insert(
            layer_key(i, "mlp1"),
            Tensor::trunc_normal(&[d, hidden], INIT_STD, rng),
        );
        p.insert(layer_key(i, "mlp1.bias"), Tensor::zeros(&[hidden]));
        p.insert(
            layer_key(i, "mlp2"),
            Tensor::trunc_normal(&[hidden, d], INIT_STD, rng),
        );
        p.insert(layer_key(i, "mlp2.bias"), Tensor::zeros(&[d]));
    }
    p.insert("vit.norm", Tensor::ones(&[d]));
    p.insert("vit.norm.bias", Tensor::zeros(&[d]));
    Ok(p)
}

/// Embeds `image` into `[(J+1), D]` tokens with the class token at row 0.
pub fn patch_embed(tape: &mut Tape, bound: &Bound, cfg: &VitConfig, image: &Tensor) -> Result<Var> {
    check_image(cfg, image)?;
    embed_tokens(
        tape,
        &cfg.layout(),
        bound.get("vit.patch_proj")?,
        bound.get("vit.cls")?,
        bound.get("vit.pos")?,
        image,
    )
}

fn check_image(cfg: &VitConfig, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != cfg.channels {
        return Err(Error::Config(format!(
            "expected an [H, W, {}] image, got {s:?}",
            cfg.channels
        )));
    }
    Ok(())
}

pub struct MsaOutput {
    pub out: Var,
    /// One `[N, N]` attention matrix per head.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention over `x: [N, D]`.
///
/// Columns of `wqkv: [D, 3D]` are laid out `[q | k | v]`, each split into
/// `heads` contiguous blocks of `D/heads`.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    wqkv: Var,
    wmsa: Var,
    heads: usize,
) -> Result<MsaOutput> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{d} channels cannot split into {heads} heads"
        )));
    }
    let dh = d / heads;
    let qkv = tape.matmul(x, wqkv)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice(qkv, 1, h * dh, dh)?;
        let k = tape.slice(qkv, 1, d + h * dh, dh)?;
        let v = tape.slice(qkv, 1, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, v)?);
        attention.push(a);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    let out = tape.matmul(merged, wmsa)?;
    Ok(MsaOutput { out, attention })
}

pub struct VitOutput {
    /// Final-layer normalized class-token representation, `[D]`.
    pub cls: Var,
    /// Final normalized token sequence, `[N, D]`.
    pub tokens: Var,
    /// Per layer, attention weights `[heads, N, N]`.
    pub attention: Vec<Tensor>,
}

pub fn vit_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &VitConfig,
    image: &Tensor,
) -> Result<VitOutput> {
    let mut x = patch_embed(tape, bound, cfg, image)?;
    let n = tape.shape(x)[0];
    let mut attention = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let g = |part: &str| bound.get(&layer_key(i, part));
        let h = tape.layer_norm(x, g("norm1")?, g("norm1.bias")?, LN_EPS)?;
        let msa = multi_head_self_attention(tape, h, g("wqkv")?, g("wmsa")?, cfg.heads)?;
        x = tape.add(x, msa.out)?;
        let mut maps = Vec::with_capacity(cfg.heads * n * n);
        for &a in &msa.attention {
            maps.extend_from_slice(tape.data(a));
        }
        attention.push(Tensor::new(&[cfg.heads, n, n], maps)?);

        let h = tape.layer_norm(x, g("norm2")?, g("norm2.bias")?, LN_EPS)?;
        let h = tape.linear(h, g("mlp1")?, Some(g("mlp1.bias")?))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, g("mlp2")?, Some(g("mlp2.bias")?))?;
        x = tape.add(x, h)?;
    }
    let tokens = tape.layer_norm(
        x,
        bound.get("vit.norm")?,
        bound.get("vit.norm.bias")?,
        LN_EPS,
    )?;
    let d = cfg.embed_dim;
    let cls = tape.slice(tokens, 0, 0, 1)?;
    let cls = tape.reshape(cls, &[d])?;
    Ok(VitOutput {
        cls,
        tokens,
        attention,
    })
}

//! Architecture-agnostic wrapper over the ViT and Vim backbones.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vim::{self, VimConfig};
use crate::vit::{self, VitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum BackboneConfig {
    Vit(VitConfig),
    Vim(VimConfig),
}

pub struct BackboneOutput {
    /// Class-token representation, `[D]`.
    pub cls: Var,
    /// Per-layer attention `[heads, N, N]`; `None` for Vim.
    pub attention: Option<Vec<Tensor>>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Vit(c) => c.validate(),
            Self::Vim(c) => c.validate(),
        }
    }

    pub fn arch(&self) -> &'static str {
        match self {
            Self::Vit(_) => "vit",
            Self::Vim(_) => "vim",
        }
    }

    /// Parameter-name prefix shared by every backbone tensor.
    pub fn prefix(&self) -> &'static str {
        match self {
            Self::Vit(_) => "vit.",
            Self::Vim(_) => "vim.",
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Self::Vit(c) => c.embed_dim,
            Self::Vim(c) => c.embed_dim,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            Self::Vit(c) => c.patch_size,
            Self::Vim(c) => c.patch_size,
        }
    }

    /// Native `(height, width)` input size.
    pub fn image_size(&self) -> (usize, usize) {
        match self {
            Self::Vit(c) => (c.image_height, c.image_width),
            Self::Vim(c) => (c.image_height, c.image_width),
        }
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamStore> {
        match self {
            Self::Vit(c) => vit::init_params(c, rng),
            Self::Vim(c) => vim::init_params(c, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
    ) -> Result<BackboneOutput> {
        match self {
            Self::Vit(c) => {
                let out = vit::vit_forward(tape, bound, c, image)?;
                Ok(BackboneOutput {
                    cls: out.cls,
                    attention: Some(out.attention),
                })
            }
            Self::Vim(c) => {
                let out = vim::vim_forward(tape, bound, c, image)?;
                Ok(BackboneOutput {
                    cls: out.cls,
                    attention: None,
                })
            }
        }
    }

    /// Class-token features of each image without gradient tracking.
    pub fn features(
        &self,
        params: &ParamStore,
        images: &[Tensor],
        exec: Exec,
    ) -> Result<Vec<Vec<f32>>> {
        par::map_indexed(images.len(), exec, |i| {
            let mut tape = Tape::with_exec(Exec::Sequential);
            let bound = params.bind(&mut tape, false);
            let out = self.forward(&mut tape, &bound, &images[i])?;
            Ok(tape.data(out.cls).to_vec())
        })
        .into_iter()
        .collect()
    }
}

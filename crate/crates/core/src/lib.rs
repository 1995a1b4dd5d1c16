//! Desk-scale vision backbones (ViT and bidirectional selective-scan Vim),
//! self-distillation training, augmentation pipelines and evaluation, on top
//! of a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod dino;
pub mod embed;
pub mod error;
pub mod eval;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod vim;
pub mod vit;
pub mod viz;

pub use autodiff::{Tape, Var};
pub use backbone::BackboneConfig;
pub use error::{Error, Result};
pub use params::{Bound, Grads, ParamStore};
pub use tensor::Tensor;

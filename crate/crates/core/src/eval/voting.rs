//! Single-crop and four-crop inference on wide frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::classifier::{argmax, Classifier};
use crate::data::augment::{overlapping_crops, WIDE_CROP_HEIGHT, WIDE_CROP_WIDTH};
use crate::data::image::{crop, dims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Positive-probability threshold of the vote.
pub const VOTE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    SingleCrop,
    FourCrop,
}

impl fmt::Display for Voting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleCrop => "single_crop",
            Self::FourCrop => "four_crop",
        })
    }
}

impl FromStr for Voting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_crop" => Ok(Self::SingleCrop),
            "four_crop" => Ok(Self::FourCrop),
            _ => Err(Error::Config(format!(
                "unknown voting {s:?} (single_crop, four_crop)"
            ))),
        }
    }
}

/// Window size used by both inference modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub width: usize,
    pub height: usize,
}

impl Default for CropGeometry {
    fn default() -> Self {
        Self {
            width: WIDE_CROP_WIDTH,
            height: WIDE_CROP_HEIGHT,
        }
    }
}

/// Max rule over per-crop positive probabilities: `(prediction, probability)`.
pub fn vote_max(positive_probs: &[f32]) -> (usize, f32) {
    let p = positive_probs
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    (usize::from(p >= VOTE_THRESHOLD), p)
}

/// Centered window of `geom`, or the whole frame when it is smaller than the
/// window in either direction.
pub fn center_crop(image: &Tensor, geom: CropGeometry) -> Result<Tensor> {
    let (h, w, _) = dims(image);
    if h < geom.height || w < geom.width {
        return Ok(image.clone());
    }
    crop(
        image,
        (h - geom.height) / 2,
        (w - geom.width) / 2,
        geom.height,
        geom.width,
    )
}

fn require_binary(model: &Classifier) -> Result<()> {
    match model.num_classes() {
        2 => Ok(()),
        c => Err(Error::Contract(format!(
            "four-crop voting needs a binary task, model has {c} classes"
        ))),
    }
}

/// Runs the four overlapping crops through `model` independently and keeps
/// the largest positive-class probability (class index 1).
pub fn four_crop_vote(
    image: &Tensor,
    model: &Classifier,
    geom: CropGeometry,
) -> Result<(usize, f32)> {
    require_binary(model)?;
    let crops = overlapping_crops(image, geom.width, geom.height)?;
    let mut probs = Vec::with_capacity(4);
    for c in &crops {
        probs.push(model.probs(c)?[1]);
    }
    Ok(vote_max(&probs))
}

/// Class prediction of one frame under `voting`.
pub fn predict(
    image: &Tensor,
    model: &Classifier,
    voting: Voting,
    geom: CropGeometry,
) -> Result<usize> {
    match voting {
        Voting::SingleCrop => Ok(argmax(&model.probs(&center_crop(image, geom)?)?)),
        Voting::FourCrop => four_crop_vote(image, model, geom).map(|(pred, _)| pred),
    }
}

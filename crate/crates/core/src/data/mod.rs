//! Image ingestion, manifests, splits, samplers, augmentation and synthetic corpora.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod sampler;
pub mod synth;

//! Downstream evaluation: probing, fine-tuning, metrics and crop voting.

pub mod classifier;
pub mod metrics;
pub mod report;
pub mod train;
pub mod voting;

pub use classifier::{masked_multilabel_loss, Classifier};
pub use metrics::{compute_metrics, F1Kind, MetricReport};
pub use report::{write_epoch_metrics, Results};
pub use train::{
    evaluate, finetune, linear_probe, positive_class, LabeledImages, Mode, ProbeConfig,
    ProbeOutcome, TaskData,
};
pub use voting::{four_crop_vote, vote_max, CropGeometry, Voting};

//! Linear probing and full fine-tuning on labeled splits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::classifier::{
    classifier_logits, cross_entropy, init_classifier, input_spec, Classifier,
};
use super::metrics::{compute_metrics, MetricReport};
use super::voting::{center_crop, predict, CropGeometry, Voting};
use crate::autodiff::Tape;
use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::data::augment::{augment, eval_transform, AugmentSpec};
use crate::data::dataset::{LabeledDataset, Split, SplitManifest};
use crate::data::image;
use crate::data::sampler::{shuffled_batches, BalancedSampler};
use crate::dino::trainer::backbone_weights;
use crate::error::{Error, Result};
use crate::optim::{cosine, AdamW};
use crate::par::{self, Exec};
use crate::params::{sum_grads, Grads, ParamStore};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

const HEAD_STREAM: u64 = 0xC1A5;
const EPOCH_STREAM: u64 = 0xF17E;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Finetune,
    LinearProbe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::LinearProbe => "linear_probe",
        }
    }

    /// Learning rate used when the config leaves it unset.
    pub fn default_lr(self) -> f64 {
        match self {
            Self::Finetune => 1e-4,
            Self::LinearProbe => 1e-3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Self::Finetune),
            "linear_probe" | "probe" => Ok(Self::LinearProbe),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (finetune, linear_probe)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Peak learning rate, decayed along a cosine to zero; `None` picks the
    /// mode default.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Draw batches class-uniformly instead of shuffling.
    pub balanced_sampling: bool,
    /// Random resized crops and flips during fine-tuning.
    pub augment: bool,
    pub voting: Voting,
    pub crop: CropGeometry,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Finetune,
            epochs: 30,
            lr: None,
            weight_decay: 0.05,
            batch_size: 32,
            balanced_sampling: false,
            augment: true,
            voting: Voting::SingleCrop,
            crop: CropGeometry::default(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.mode.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr() < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr and weight_decay must be nonnegative".into(),
            ));
        }
        if self.crop.width == 0 || self.crop.height == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Raw `[H, W, 3]` images in [0, 1] with class indices.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images for {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Members of `split` labeled for `task`, as class indices.
    pub fn load(
        ds: &LabeledDataset,
        manifest: &SplitManifest,
        task: &str,
        split: Split,
    ) -> Result<Self> {
        let mut out = Self::default();
        for i in ds.indices_in(manifest, split) {
            if let Some(c) = ds.class_index(i, task) {
                out.images.push(image::load(ds.resolve(i))?);
                out.labels.push(c);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Train/val/test images of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: String,
    pub train: LabeledImages,
    pub val: LabeledImages,
    pub test: LabeledImages,
    pub num_classes: usize,
    /// Class index whose F1 is reported on binary tasks.
    pub positive_class: usize,
}

impl TaskData {
    /// Loads every split member labeled for `task`.
    pub fn load(ds: &LabeledDataset, manifest: &SplitManifest, task: &str) -> Result<Self> {
        let alphabet = ds.alphabet(task)?.to_vec();
        let load_split = |split| LabeledImages::load(ds, manifest, task, split);
        let data = Self {
            task: task.to_string(),
            train: load_split(Split::Train)?,
            val: load_split(Split::Val)?,
            test: load_split(Split::Test)?,
            num_classes: alphabet.len(),
            positive_class: positive_class(&alphabet),
        };
        if data.train.is_empty() {
            return Err(Error::Contract(format!(
                "no training images labeled for {task}"
            )));
        }
        Ok(data)
    }
}

/// Position of label 1 in a two-class alphabet, else the last class.
pub fn positive_class(alphabet: &[u32]) -> usize {
    alphabet
        .iter()
        .position(|&l| l == 1)
        .filter(|_| alphabet.len() == 2)
        .unwrap_or(alphabet.len().saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_acc: f64,
    pub val_bacc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    /// Head only after probing; backbone and head after fine-tuning.
    pub params: ParamStore,
    /// Test metrics of the selected epoch.
    pub report: MetricReport,
    pub history: Vec<EpochMetrics>,
    /// Epoch with the best validation balanced accuracy; `None` when nothing
    /// was trained.
    pub best_epoch: Option<usize>,
    /// Digest of the backbone tensors the run started from.
    pub backbone_digest: String,
}

/// Backbone tensors of `store` (the teacher copy when present), checked
/// against the layout `backbone` expects.
pub fn backbone_subset(backbone: &BackboneConfig, store: &ParamStore) -> Result<ParamStore> {
    backbone_weights(store, backbone)
}

/// Metrics of `model` on `data` under `voting`.
pub fn evaluate(
    model: &Classifier,
    data: &LabeledImages,
    voting: Voting,
    geom: CropGeometry,
    positive_class: usize,
) -> Result<MetricReport> {
    let preds = par::map_indexed(data.len(), model.exec, |i| {
        predict(&data.images[i], model, voting, geom)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    compute_metrics(&preds, &data.labels, model.num_classes(), positive_class)
}

fn prepared(image: &Tensor, spec: &AugmentSpec, geom: CropGeometry) -> Result<Tensor> {
    Ok(eval_transform(&center_crop(image, geom)?, spec))
}

struct Fit<'a> {
    cfg: &'a ProbeConfig,
    labels: &'a [usize],
}

struct Fitted {
    params: ParamStore,
    history: Vec<EpochMetrics>,
    best_epoch: Option<usize>,
}

impl Fit<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.cfg.batch_size).max(1)
    }

    fn batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let mut r = rng::seeded(derive_seed(self.cfg.seed, EPOCH_STREAM + epoch as u64));
        if self.cfg.balanced_sampling {
            let sampler = BalancedSampler::new(self.labels.iter().copied().enumerate())?;
            Ok(sampler.batches(self.cfg.batch_size, self.steps_per_epoch(), &mut r))
        } else {
            let all: Vec<usize> = (0..self.labels.len()).collect();
            Ok(shuffled_batches(&all, self.cfg.batch_size, &mut r))
        }
    }

    /// AdamW with a cosine learning rate; after each epoch `validate` may
    /// score the parameters, and the best-scoring epoch is kept (earliest on
    /// ties). Without validation data the last epoch is kept.
    fn run(
        &self,
        mut params: ParamStore,
        sample: impl Fn(&ParamStore, usize, u64) -> Result<(f64, Grads)> + Sync,
        mut validate: impl FnMut(&ParamStore) -> Result<Option<MetricReport>>,
    ) -> Result<Fitted> {
        let per_epoch = self.steps_per_epoch();
        let total = self.cfg.epochs * per_epoch;
        let mut opt = AdamW::default();
        let mut step = 0usize;
        let mut history = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, usize, ParamStore)> = None;
        for epoch in 0..self.cfg.epochs {
            let mut losses = Vec::new();
            let mut lr = 0.0;
            for batch in self.batches(epoch)? {
                lr = cosine(step, total, self.cfg.lr(), 0.0);
                let outs = par::map_indexed(batch.len(), Exec::Parallel, |slot| {
                    sample(
                        &params,
                        batch[slot],
                        derive_seed(derive_seed(self.cfg.seed, step as u64), slot as u64),
                    )
                });
                let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
                let loss = outs.iter().map(|(l, _)| l).sum::<f64>() / outs.len() as f64;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "epoch {epoch} step {step}: loss {loss}"
                    )));
                }
                let grads = sum_grads(outs.iter().map(|(_, g)| g), 1.0 / batch.len() as f32);
                opt.step(&mut params, &grads, lr as f32, self.cfg.weight_decay as f32)?;
                losses.push(loss);
                step += 1;
            }
            let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            let val = validate(&params)?;
            let (val_acc, val_bacc, val_f1) =
                val.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| {
                    (m.accuracy, m.balanced_accuracy, m.f1)
                });
            log::info!("epoch {epoch}: loss {train_loss:.4} val bacc {val_bacc:.4}");
            history.push(EpochMetrics {
                epoch,
                train_loss,
                lr,
                val_acc,
                val_bacc,
                val_f1,
            });
            let better = match (&val, &best) {
                (Some(_), Some((b, _, _))) => val_bacc > *b,
                _ => true,
            };
            if better {
                best = Some((val_bacc, epoch, params.clone()));
            }
        }
        Ok(match best {
            Some((_, epoch, params)) => Fitted {
                params,
                history,
                best_epoch: Some(epoch),
            },
            None => Fitted {
                params,
                history,
                best_epoch: None,
            },
        })
    }
}

fn head_init(cfg: &ProbeConfig, dim: usize, classes: usize) -> Result<ParamStore> {
    init_classifier(
        dim,
        classes,
        &mut rng::seeded(derive_seed(cfg.seed, HEAD_STREAM)),
    )
}

/// Trains a linear head on frozen class-token features.
///
/// Features are extracted once from the deterministic single-crop view. The
/// backbone digest is recomputed at the end and any change is a contract
/// violation.
pub fn linear_probe(
    backbone: &BackboneConfig,
    store: &ParamStore,
    data: &TaskData,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let frozen = backbone_subset(backbone, store)?;
    let digest = checkpoint::digest(&frozen)?;
    let spec = input_spec(backbone);
    let features = |set: &LabeledImages| -> Result<Vec<Vec<f32>>> {
        let inputs = set
            .images
            .iter()
            .map(|img| prepared(img, &spec, cfg.crop))
            .collect::<Result<Vec<_>>>()?;
        backbone.features(&frozen, &inputs, Exec::Parallel)
    };
    let train_feats = features(&data.train)?;
    let val_feats = features(&data.val)?;
    let dim = backbone.embed_dim();
    let head = head_init(cfg, dim, data.num_classes)?;

    let logits_of = |head: &ParamStore, feats: &[Vec<f32>]| -> Result<Vec<usize>> {
        let mut tape = Tape::with_exec(Exec::Sequential);
        let bound = head.bind(&mut tape, false);
        let flat: Vec<f32> = feats.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(&[feats.len(), dim], flat)?);
        let logits = classifier_logits(&mut tape, &bound, x)?;
        let c = data.num_classes;
        Ok(tape
            .data(logits)
            .chunks(c)
            .map(super::classifier::argmax)
            .collect())
    };
    let fit = Fit {
        cfg,
        labels: &data.train.labels,
    };
    let fitted = fit.run(
        head,
        |head, i, _| {
            let mut tape = Tape::with_exec(Exec::Sequential);
            let bound = head.bind(&mut tape, true);
            let x = tape.constant(Tensor::new(&[1, dim], train_feats[i].clone())?);
            let logits = classifier_logits(&mut tape, &bound, x)?;
            let loss = cross_entropy(&mut tape, logits, &[data.train.labels[i]])?;
            tape.backward(loss)?;
            Ok((f64::from(tape.data(loss)[0]), bound.grads(&tape)))
        },
        |head| {
            if data.val.is_empty() {
                return Ok(None);
            }
            let preds = logits_of(head, &val_feats)?;
            compute_metrics(
                &preds,
                &data.val.labels,
                data.num_classes,
                data.positive_class,
            )
            .map(Some)
        },
    )?;
    let mut full = frozen.clone();
    full.extend(fitted.params.clone());
    let model = Classifier::new(backbone.clone(), full)?;
    let report = evaluate(
        &model,
        &data.test,
        cfg.voting,
        cfg.crop,
        data.positive_class,
    )?;
    let after = checkpoint::digest(&frozen)?;
    if after != digest {
        return Err(Error::Contract(
            "backbone parameters changed during linear probing".into(),
        ));
    }
    Ok(ProbeOutcome {
        params: fitted.params,
        report,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        backbone_digest: digest,
    })
}

/// Trains backbone and a fresh linear head end to end.
pub fn finetune(
    backbone: &BackboneConfig,
    store: &ParamStore,
    data: &TaskData,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let start = backbone_subset(backbone, store)?;
    let digest = checkpoint::digest(&start)?;
    let mut params = start;
    params.extend(head_init(cfg, backbone.embed_dim(), data.num_classes)?);
    let spec = input_spec(backbone);
    let train_spec = AugmentSpec {
        out_height: spec.out_height,
        out_width: spec.out_width,
        ..AugmentSpec::eval_train(spec.out_height)
    };
    let d = backbone.embed_dim();
    let fit = Fit {
        cfg,
        labels: &data.train.labels,
    };
    let fitted = fit.run(
        params,
        |params, i, seed| {
            let raw = &data.train.images[i];
            let x = if cfg.augment {
                augment(raw, &train_spec, &mut rng::seeded(seed))?
            } else {
                prepared(raw, &spec, cfg.crop)?
            };
            let mut tape = Tape::with_exec(Exec::Sequential);
            let bound = params.bind(&mut tape, true);
            let out = backbone.forward(&mut tape, &bound, &x)?;
            let feat = tape.reshape(out.cls, &[1, d])?;
            let logits = classifier_logits(&mut tape, &bound, feat)?;
            let loss = cross_entropy(&mut tape, logits, &[data.train.labels[i]])?;
            tape.backward(loss)?;
            Ok((f64::from(tape.data(loss)[0]), bound.grads(&tape)))
        },
        |params| {
            if data.val.is_empty() {
                return Ok(None);
            }
            let model = Classifier::new(backbone.clone(), params.clone())?;
            evaluate(&model, &data.val, cfg.voting, cfg.crop, data.positive_class).map(Some)
        },
    )?;
    let model = Classifier::new(backbone.clone(), fitted.params.clone())?;
    let report = evaluate(
        &model,
        &data.test,
        cfg.voting,
        cfg.crop,
        data.positive_class,
    )?;
    Ok(ProbeOutcome {
        params: fitted.params,
        report,
        history: fitted.history,
        best_epoch: fitted.best_epoch,
        backbone_digest: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_defaults() {
        let cfg = ProbeConfig::default();
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.lr(), 1e-4);
        let probe = ProbeConfig {
            mode: Mode::LinearProbe,
            ..cfg
        };
        assert_eq!(probe.lr(), 1e-3);
        assert_eq!("probe".parse::<Mode>().unwrap(), Mode::LinearProbe);
    }

    #[test]
    fn positive_class_prefers_label_one() {
        assert_eq!(positive_class(&[0, 1]), 1);
        assert_eq!(positive_class(&[1, 2]), 0);
        assert_eq!(positive_class(&[0, 1, 9]), 2);
    }

    #[test]
    fn config_from_toml() {
        let cfg: ProbeConfig =
            toml::from_str("mode = \"linear_probe\"\nvoting = \"four_crop\"\n").unwrap();
        assert_eq!(cfg.mode, Mode::LinearProbe);
        assert_eq!(cfg.voting, Voting::FourCrop);
        assert!(toml::from_str::<ProbeConfig>("epoch = 3").is_err());
    }
}

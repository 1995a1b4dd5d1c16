//! Student/teacher state and the self-distillation training loop.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DinoConfig, Schedule, ScheduleValues};
use super::head::{head_forward, init_head, HeadConfig};
use super::loss::{cross_view_loss, ema_update, entropy, teacher_probs, Center, GLOBAL_VIEWS};
use crate::autodiff::{Tape, Var};
use crate::backbone::BackboneConfig;
use crate::checkpoint;
use crate::data::augment::{make_views, MultiCropSpec};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::par::{self, Exec};
use crate::params::{clip_global_norm, global_norm, sum_grads, Bound, Grads, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;
const EPOCH_STREAM: u64 = 0xE90C;
const TEACHER_PREFIX: &str = "teacher.";

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct DinoState {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Backbone and head parameters updated by the optimizer.
    pub student: ParamStore,
    /// Same layout as `student`; only ever moved by [`ema_update`].
    pub teacher: ParamStore,
    pub center: Center,
    pub step: usize,
    pub optimizer: AdamW,
}

impl DinoState {
    /// Fresh student with an identical teacher copy.
    pub fn init(backbone: BackboneConfig, head: HeadConfig, cfg: &DinoConfig) -> Result<Self> {
        backbone.validate()?;
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, INIT_STREAM));
        let mut student = backbone.init(&mut r)?;
        student.extend(init_head(&head, backbone.embed_dim(), &mut r)?);
        Self::from_student(backbone, head, student, cfg)
    }

    /// Starts from existing weights; a missing head is freshly initialized.
    pub fn from_student(
        backbone: BackboneConfig,
        head: HeadConfig,
        mut student: ParamStore,
        cfg: &DinoConfig,
    ) -> Result<Self> {
        if !student.contains("head.last") {
            let mut r = rng::seeded(rng::derive_seed(cfg.seed, INIT_STREAM + 1));
            student.extend(init_head(&head, backbone.embed_dim(), &mut r)?);
        }
        let k = head.out_dim;
        Ok(Self {
            backbone,
            center: Center::new(k, cfg.center_momentum as f32),
            head,
            teacher: student.clone(),
            student,
            step: 0,
            optimizer: AdamW::default(),
        })
    }

    /// Student tensors under their own names, teacher under `teacher.`,
    /// plus center, step counter and optimizer moments.
    pub fn to_checkpoint(&self) -> Result<ParamStore> {
        let mut out = self.student.clone();
        for (name, t) in self.teacher.iter() {
            out.insert(format!("{TEACHER_PREFIX}{name}"), t.clone());
        }
        out.insert(
            "dino.center",
            Tensor::new(&[self.center.values.len()], self.center.values.clone())?,
        );
        out.insert("dino.step", Tensor::scalar(self.step as f32));
        out.extend(self.optimizer.state(&self.student)?);
        Ok(out)
    }

    /// Restores a state written by [`DinoState::to_checkpoint`], step counter
    /// included, so schedules resume exactly where they stopped.
    pub fn from_checkpoint(
        store: &ParamStore,
        backbone: BackboneConfig,
        head: HeadConfig,
        cfg: &DinoConfig,
    ) -> Result<Self> {
        let mut student = ParamStore::new();
        let mut teacher = ParamStore::new();
        for (name, t) in store.iter() {
            if let Some(rest) = name.strip_prefix(TEACHER_PREFIX) {
                teacher.insert(rest, t.clone());
            } else if !name.starts_with("dino.") && !name.starts_with("adam.") {
                student.insert(name.clone(), t.clone());
            }
        }
        teacher.check_same_layout(&student)?;
        let center = store.get("dino.center")?;
        if center.numel() != head.out_dim {
            return Err(Error::Checkpoint(format!(
                "center has {} entries, head expects {}",
                center.numel(),
                head.out_dim
            )));
        }
        Ok(Self {
            backbone,
            head,
            student,
            teacher,
            center: Center {
                values: center.data().to_vec(),
                rate: cfg.center_momentum as f32,
            },
            step: store.get("dino.step")?.data()[0] as usize,
            optimizer: AdamW::from_state(store)?,
        })
    }
}

/// Backbone weights for downstream use: the teacher copy when the checkpoint
/// carries one, otherwise the plain backbone tensors.
pub fn backbone_weights(store: &ParamStore, backbone: &BackboneConfig) -> Result<ParamStore> {
    let prefix = backbone.prefix();
    let teacher = store.subset(&format!("{TEACHER_PREFIX}{prefix}"));
    let mut out = ParamStore::new();
    if teacher.is_empty() {
        out.extend(store.subset(prefix));
    } else {
        for (name, t) in teacher.iter() {
            out.insert(&name[TEACHER_PREFIX.len()..], t.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no `{prefix}` tensors in checkpoint; architecture mismatch?"
        )));
    }
    let mut r = rng::seeded(0);
    out.check_same_layout(&backbone.init(&mut r)?)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    /// Batch mean loss; NaN when the batch was skipped.
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub tau_t: f64,
    pub m: f64,
    pub teacher_entropy: f64,
    #[serde(skip)]
    pub grad_norm: f64,
    #[serde(skip)]
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub nan_batches: usize,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

struct SampleOut {
    loss: f64,
    grads: Grads,
    teacher_logits: Vec<f32>,
    teacher_entropy: f64,
}

/// Owns the source images and drives steps and epochs over a [`DinoState`].
pub struct Trainer<'a> {
    cfg: &'a DinoConfig,
    images: &'a [Tensor],
    views: MultiCropSpec,
    schedule: Schedule,
    exec: Exec,
    consecutive_nan: usize,
}

fn stack_rows(tape: &mut Tape, rows: &[Var], width: usize) -> Result<Var> {
    let reshaped = rows
        .iter()
        .map(|&r| tape.reshape(r, &[1, width]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&reshaped, 0)
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a DinoConfig, images: &'a [Tensor]) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Contract("training needs at least one image".into()));
        }
        let mut views =
            MultiCropSpec::dino(cfg.global_crop_size, cfg.local_crop_size, cfg.n_local_crops);
        for g in &mut views.global {
            g.scale = cfg.global_crop_scale;
        }
        views.local.scale = cfg.local_crop_scale;
        views.validate()?;
        Ok(Self {
            cfg,
            images,
            views,
            schedule: cfg.schedule(images.len()),
            exec: Exec::Parallel,
            consecutive_nan: 0,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.images.len())
    }

    /// Index batches of `epoch`: one seeded shuffle, cut into full batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        let mut r = rng::seeded(rng::derive_seed(self.cfg.seed, EPOCH_STREAM + epoch as u64));
        rng::shuffle(&mut r, &mut order);
        let b = self.cfg.batch_size.min(order.len());
        order
            .chunks(b)
            .take(self.steps_per_epoch())
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn sample(
        &self,
        state: &DinoState,
        sv: &ScheduleValues,
        image: usize,
        slot: usize,
    ) -> Result<SampleOut> {
        let seed = rng::derive_seed(
            rng::derive_seed(self.cfg.seed, state.step as u64),
            slot as u64,
        );
        let views = make_views(&self.images[image], &self.views, &mut rng::seeded(seed))?;
        let d = state.backbone.embed_dim();

        let mut ttape = Tape::with_exec(Exec::Sequential);
        let tbound = state.teacher.bind(&mut ttape, false);
        let tcls = views.global[..GLOBAL_VIEWS]
            .iter()
            .map(|v| Ok(state.backbone.forward(&mut ttape, &tbound, v)?.cls))
            .collect::<Result<Vec<_>>>()?;
        let tfeat = stack_rows(&mut ttape, &tcls, d)?;
        let tlogits = head_forward(&mut ttape, &tbound, tfeat)?;
        let teacher_logits = ttape.value(tlogits).clone();
        let probs = teacher_probs(
            &teacher_logits,
            &state.center.values,
            sv.teacher_temp as f32,
        )?;
        let teacher_entropy = (0..GLOBAL_VIEWS)
            .map(|g| entropy(probs.row(g)))
            .sum::<f64>()
            / GLOBAL_VIEWS as f64;

        let mut tape = Tape::with_exec(Exec::Sequential);
        let bound: Bound = state.student.bind(&mut tape, true);
        let scls = views
            .iter()
            .map(|v| Ok(state.backbone.forward(&mut tape, &bound, v)?.cls))
            .collect::<Result<Vec<_>>>()?;
        let sfeat = stack_rows(&mut tape, &scls, d)?;
        let slogits = head_forward(&mut tape, &bound, sfeat)?;
        let loss = cross_view_loss(&mut tape, slogits, &probs, self.cfg.student_temp as f32)?;
        tape.backward(loss)?;
        Ok(SampleOut {
            loss: f64::from(tape.data(loss)[0]),
            grads: bound.grads(&tape),
            teacher_logits: teacher_logits.into_data(),
            teacher_entropy,
        })
    }

    /// One optimizer step on `batch`. Non-finite batches are skipped and
    /// counted; too many in a row abort with [`Error::Numerical`].
    pub fn train_step(&mut self, state: &mut DinoState, batch: &[usize]) -> Result<StepStats> {
        let sv = self.schedule.at(state.step)?;
        let outs = par::map_indexed(batch.len(), self.exec, |slot| {
            self.sample(state, &sv, batch[slot], slot)
        });
        let mut samples = Vec::with_capacity(outs.len());
        let mut failure = None;
        for (slot, out) in outs.into_iter().enumerate() {
            match out {
                Ok(s) if s.loss.is_finite() => samples.push(s),
                Ok(s) => failure = Some(format!("sample {slot}: loss {}", s.loss)),
                Err(Error::Numerical(msg)) => failure = Some(format!("sample {slot}: {msg}")),
                Err(e) => return Err(e),
            }
        }
        let n = samples.len().max(1) as f64;
        let teacher_entropy = samples.iter().map(|s| s.teacher_entropy).sum::<f64>() / n;
        let mut grads = sum_grads(samples.iter().map(|s| &s.grads), 1.0 / batch.len() as f32);
        let norm = global_norm(&grads);
        if failure.is_none() && !norm.is_finite() {
            failure = Some(format!("gradient norm {norm}"));
        }
        let mut stats = StepStats {
            step: state.step,
            loss: f64::NAN,
            lr: sv.lr,
            wd: sv.wd,
            tau_t: sv.teacher_temp,
            m: sv.momentum,
            teacher_entropy,
            grad_norm: f64::from(norm),
            skipped: true,
        };
        if let Some(msg) = failure {
            self.consecutive_nan += 1;
            log::warn!("step {}: skipping non-finite batch ({msg})", state.step);
            if self.consecutive_nan >= self.cfg.max_nan_batches {
                return Err(Error::Numerical(format!(
                    "{} consecutive non-finite batches; last at step {}: {msg}",
                    self.consecutive_nan, state.step
                )));
            }
            state.step += 1;
            return Ok(stats);
        }
        self.consecutive_nan = 0;
        if self.cfg.clip_grad > 0.0 {
            clip_global_norm(&mut grads, self.cfg.clip_grad as f32);
        }
        state
            .optimizer
            .step(&mut state.student, &grads, sv.lr as f32, sv.wd as f32)?;
        ema_update(&mut state.teacher, &state.student, sv.momentum as f32)?;
        if self.cfg.centering {
            let k = state.head.out_dim;
            let rows: Vec<&[f32]> = samples
                .iter()
                .flat_map(|s| s.teacher_logits.chunks(k))
                .collect();
            state.center.update(&rows)?;
        }
        stats.loss = samples.iter().map(|s| s.loss).sum::<f64>() / n;
        stats.skipped = false;
        state.step += 1;
        Ok(stats)
    }

    pub fn train_epoch(
        &mut self,
        state: &mut DinoState,
        epoch: usize,
        mut on_step: impl FnMut(&StepStats) -> Result<()>,
    ) -> Result<EpochStats> {
        let mut losses = Vec::new();
        let mut norms = Vec::new();
        let mut nan_batches = 0;
        for batch in self.epoch_batches(epoch) {
            let s = self.train_step(state, &batch)?;
            on_step(&s)?;
            if s.skipped {
                nan_batches += 1;
            } else {
                losses.push(s.loss);
                norms.push(s.grad_norm);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(EpochStats {
            epoch,
            mean_loss: mean(&losses),
            nan_batches,
            grad_norm_mean: mean(&norms),
            grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
        })
    }

    /// Trains the remaining epochs, writing `train_log.csv`, `epochs.csv` and
    /// `ckpt_epoch{N}.nvk` (every `checkpoint_every` epochs and at the end)
    /// into `out_dir`. Returns the checkpoint paths.
    pub fn run(&mut self, state: &mut DinoState, out_dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.csv");
        let epoch_path = out_dir.join("epochs.csv");
        // headers are written explicitly so that a run with no steps still has them
        let writer = |p: &Path| {
            csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(p)
                .map_err(|e| Error::Contract(e.to_string()))
        };
        let mut step_log = writer(&log_path)?;
        let mut epoch_log = writer(&epoch_path)?;
        step_log.write_record(["step", "loss", "lr", "wd", "tau_t", "m", "teacher_entropy"])?;
        epoch_log.write_record([
            "epoch",
            "mean_loss",
            "nan_batches",
            "grad_norm_mean",
            "grad_norm_max",
        ])?;

        let first = state.step / self.steps_per_epoch();
        let mut saved = Vec::new();
        for epoch in first..self.cfg.epochs {
            let stats = self.train_epoch(state, epoch, |s| Ok(step_log.serialize(s)?))?;
            epoch_log.serialize(stats)?;
            log::info!(
                "epoch {}: loss {:.4}, {} skipped, grad norm {:.3}",
                epoch + 1,
                stats.mean_loss,
                stats.nan_batches,
                stats.grad_norm_mean
            );
            let done = epoch + 1;
            if (self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0)
                || done == self.cfg.epochs
            {
                saved.push(save_checkpoint(state, out_dir, done)?);
            }
        }
        if saved.is_empty() {
            saved.push(save_checkpoint(state, out_dir, self.cfg.epochs.min(first))?);
        }
        step_log.flush().map_err(|e| Error::io(&log_path, e))?;
        epoch_log.flush().map_err(|e| Error::io(&epoch_path, e))?;
        Ok(saved)
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.nvk")
}

fn save_checkpoint(state: &DinoState, dir: &Path, epoch: usize) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(epoch));
    checkpoint::save(&state.to_checkpoint()?, &path)?;
    Ok(path)
}

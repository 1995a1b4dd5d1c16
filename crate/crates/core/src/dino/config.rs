//! Training hyperparameters and the per-step schedules derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{cosine, warmup_cosine};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DinoConfig {
    pub epochs: usize,
    /// Learning rate reached at the end of warmup.
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    /// Weight decay at step 0, raised along a cosine to `weight_decay_end`.
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub teacher_temp: f64,
    /// Teacher temperature at step 0 when warming up.
    pub warmup_teacher_temp: f64,
    pub warmup_teacher_temp_epochs: usize,
    pub student_temp: f64,
    pub momentum_teacher: f64,
    pub center_momentum: f64,
    /// Disabling centering exposes the collapse it prevents.
    pub centering: bool,
    pub batch_size: usize,
    pub n_local_crops: usize,
    pub global_crop_size: usize,
    pub local_crop_size: usize,
    pub global_crop_scale: (f32, f32),
    pub local_crop_scale: (f32, f32),
    /// Max global gradient norm; 0 disables clipping.
    pub clip_grad: f64,
    /// Abort after this many consecutive non-finite batches.
    pub max_nan_batches: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl DinoConfig {
    /// ViT-S/16 first-round settings.
    pub fn vit_small() -> Self {
        Self {
            epochs: 100,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            teacher_temp: 0.04,
            warmup_teacher_temp: 0.04,
            warmup_teacher_temp_epochs: 0,
            student_temp: 0.1,
            momentum_teacher: 0.996,
            center_momentum: 0.9,
            centering: true,
            batch_size: 64,
            n_local_crops: 8,
            global_crop_size: 224,
            local_crop_size: 96,
            global_crop_scale: (0.4, 1.0),
            local_crop_scale: (0.05, 0.4),
            clip_grad: 3.0,
            max_nan_batches: 10,
            checkpoint_every: 10,
            seed: 0,
        }
    }

    /// Vim-S/16 first-round settings.
    pub fn vim_small() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 32,
            ..Self::vit_small()
        }
    }

    /// Second-round continuation with ten local crops.
    pub fn vit_small_round2() -> Self {
        Self {
            epochs: 50,
            lr: 2.5e-4,
            min_lr: 5e-7,
            weight_decay: 0.5,
            weight_decay_end: 0.5,
            n_local_crops: 10,
            batch_size: 128,
            ..Self::vit_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0 && self.warmup_teacher_temp > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum_teacher)
            || !(0.0..=1.0).contains(&self.center_momentum)
        {
            return bad("momenta must lie in [0, 1]".into());
        }
        if self.lr < 0.0
            || self.min_lr < 0.0
            || self.weight_decay < 0.0
            || self.weight_decay_end < 0.0
        {
            return bad("learning rates and weight decay must be nonnegative".into());
        }
        for (name, (lo, hi)) in [
            ("global", self.global_crop_scale),
            ("local", self.local_crop_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} crop scale {lo}..{hi} outside (0, 1]"));
            }
        }
        if self.global_crop_size == 0 || self.local_crop_size == 0 {
            return bad("crop sizes must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        (dataset_len / self.batch_size).max(1)
    }

    pub fn schedule(&self, dataset_len: usize) -> Schedule {
        let per_epoch = self.steps_per_epoch(dataset_len);
        Schedule {
            total: self.epochs * per_epoch,
            warmup: self.warmup_epochs * per_epoch,
            teacher_warmup: self.warmup_teacher_temp_epochs * per_epoch,
            lr: self.lr,
            min_lr: self.min_lr,
            wd: (self.weight_decay, self.weight_decay_end),
            teacher_temp: (self.warmup_teacher_temp, self.teacher_temp),
            momentum: self.momentum_teacher,
        }
    }
}

/// Values in force at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub wd: f64,
    pub teacher_temp: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub total: usize,
    pub warmup: usize,
    pub teacher_warmup: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub wd: (f64, f64),
    pub teacher_temp: (f64, f64),
    pub momentum: f64,
}

impl Schedule {
    pub fn at(&self, step: usize) -> Result<ScheduleValues> {
        if step > self.total {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule length {}",
                self.total
            )));
        }
        let teacher_temp = if step < self.teacher_warmup {
            let (start, end) = self.teacher_temp;
            start + (end - start) * step as f64 / self.teacher_warmup as f64
        } else {
            self.teacher_temp.1
        };
        let momentum = 1.0 - (1.0 - self.momentum) * (cosine_unit(step, self.total) + 1.0) / 2.0;
        Ok(ScheduleValues {
            lr: warmup_cosine(step, self.total, self.warmup, self.lr, self.min_lr),
            wd: cosine(step, self.total, self.wd.0, self.wd.1),
            teacher_temp,
            momentum,
        })
    }
}

fn cosine_unit(step: usize, total: usize) -> f64 {
    if total == 0 {
        return -1.0;
    }
    (std::f64::consts::PI * step as f64 / total as f64).cos()
}

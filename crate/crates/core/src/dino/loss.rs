//! Temperature sharpening, cross-view distillation loss, teacher centering and
//! the EMA teacher update.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Number of views the teacher sees.
pub const GLOBAL_VIEWS: usize = 2;

/// `softmax(logits / τ)` computed in f64 with max subtraction.
pub fn sharpen(logits: &[f32], tau: f32) -> Result<Vec<f32>> {
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let tau = f64::from(tau);
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| ((f64::from(v) - max) / tau).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f32]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -f64::from(v) * f64::from(v).ln())
        .sum()
}

/// Teacher targets: each `[K]` row of `teacher_logits` centered then sharpened.
pub fn teacher_probs(teacher_logits: &Tensor, center: &[f32], tau_t: f32) -> Result<Tensor> {
    let k = *teacher_logits.shape().last().expect("rank >= 1");
    if center.len() != k {
        return Err(Error::shape("teacher center", &[k], &[center.len()]));
    }
    let rows = teacher_logits.numel() / k;
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let centered: Vec<f32> = teacher_logits.data()[r * k..(r + 1) * k]
            .iter()
            .zip(center)
            .map(|(t, c)| t - c)
            .collect();
        out.extend(sharpen(&centered, tau_t)?);
    }
    Tensor::new(&[rows, k], out)
}

/// Per-student-view target weights: row `v` is `Σ_{g ≠ v} P_t[g] / pairs`
/// with `pairs = 2·(V − 1)`. Globals must come first in the student order.
pub fn pair_weights(teacher: &Tensor, views: usize) -> Result<Tensor> {
    let g = teacher.shape()[0];
    if g != GLOBAL_VIEWS {
        return Err(Error::Contract(format!(
            "distillation needs exactly {GLOBAL_VIEWS} global views, got {g}"
        )));
    }
    if views < GLOBAL_VIEWS {
        return Err(Error::Contract(format!(
            "student saw {views} views, fewer than the globals"
        )));
    }
    let k = teacher.shape()[1];
    let pairs = (GLOBAL_VIEWS * (views - 1)) as f32;
    let mut w = vec![0.0f32; views * k];
    for v in 0..views {
        for gi in (0..GLOBAL_VIEWS).filter(|&gi| gi != v) {
            for (slot, &p) in w[v * k..(v + 1) * k].iter_mut().zip(teacher.row(gi)) {
                *slot += p / pairs;
            }
        }
    }
    Tensor::new(&[views, k], w)
}

/// Mean over (global, other view) pairs of `H(P_t, P_s) = −Σ P_t log P_s`.
///
/// `student_logits` is `[V, K]` with the two global views in rows 0 and 1;
/// `teacher` holds the two sharpened teacher rows `[2, K]`.
pub fn cross_view_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher: &Tensor,
    tau_s: f32,
) -> Result<Var> {
    if !(tau_s > 0.0) {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {tau_s}"
        )));
    }
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 || shape[1] != teacher.shape()[1] {
        return Err(Error::shape("cross_view_loss", &shape, teacher.shape()));
    }
    let weights = pair_weights(teacher, shape[0])?;
    let scaled = tape.scale(student_logits, 1.0 / tau_s);
    let log_ps = tape.log_softmax(scaled, 1)?;
    let w = tape.constant(weights);
    let prod = tape.mul(w, log_ps)?;
    let total = tape.sum(prod);
    Ok(tape.neg(total))
}

/// Running mean of teacher logits subtracted before sharpening.
#[derive(Clone, Debug, PartialEq)]
pub struct Center {
    pub values: Vec<f32>,
    pub rate: f32,
}

impl Center {
    pub fn new(k: usize, rate: f32) -> Self {
        Self {
            values: vec![0.0; k],
            rate,
        }
    }

    /// `center ← rate·center + (1 − rate)·mean(rows)`.
    pub fn update(&mut self, rows: &[&[f32]]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::Contract(
                "center update needs a nonempty batch".into(),
            ));
        }
        let k = self.values.len();
        let mut mean = vec![0.0f64; k];
        for row in rows {
            if row.len() != k {
                return Err(Error::shape("center update", &[k], &[row.len()]));
            }
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += f64::from(v);
            }
        }
        let n = rows.len() as f64;
        for (c, m) in self.values.iter_mut().zip(mean) {
            *c = self.rate * *c + (1.0 - self.rate) * (m / n) as f32;
        }
        Ok(())
    }
}

/// `teacher ← m·teacher + (1 − m)·student` for every tensor.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f32) -> Result<()> {
    teacher.check_same_layout(student)?;
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

//! Linear classification head on the class token, its losses, and a frozen
//! backbone-plus-head predictor.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::backbone::BackboneConfig;
use crate::data::augment::{eval_transform, AugmentSpec};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "classifier.weight";
pub const HEAD_BIAS: &str = "classifier.bias";
const HEAD_STD: f32 = 0.01;

/// `classifier.weight [D, C]` and a zero `classifier.bias [C]`.
pub fn init_classifier(dim: usize, classes: usize, rng: &mut Rng) -> Result<ParamStore> {
    if dim == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "classifier needs a positive width and at least two classes, got {dim}x{classes}"
        )));
    }
    let mut p = ParamStore::new();
    p.insert(
        HEAD_WEIGHT,
        Tensor::trunc_normal(&[dim, classes], HEAD_STD, rng),
    );
    p.insert(HEAD_BIAS, Tensor::zeros(&[classes]));
    Ok(p)
}

/// Number of classes of a stored head.
pub fn head_classes(params: &ParamStore) -> Result<usize> {
    let w = params.get(HEAD_WEIGHT)?;
    match w.shape() {
        [_, c] => Ok(*c),
        s => Err(Error::Checkpoint(format!(
            "{HEAD_WEIGHT} has shape {s:?}, expected [D, C]"
        ))),
    }
}

/// `[B, D]` features to `[B, C]` logits.
pub fn classifier_logits(tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
    let w = bound.get(HEAD_WEIGHT)?;
    let b = bound.get(HEAD_BIAS)?;
    tape.linear(features, w, Some(b))
}

/// Mean cross-entropy of `[B, C]` logits against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
    }
    let classes = shape[1];
    let mut onehot = Tensor::zeros(&shape);
    for (row, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Contract(format!(
                "target {t} outside {classes} classes"
            )));
        }
        onehot.set(&[row, t], 1.0);
    }
    let logp = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(mask, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / targets.len().max(1) as f32))
}

/// Mean cross-entropy over the tasks that have a label; tasks missing from
/// `labels` add neither loss nor gradient. With no labels at all the loss is
/// zero and every logit gradient is zero.
///
/// Each logit vector is `[C_task]`.
pub fn masked_multilabel_loss(
    tape: &mut Tape,
    logits: &BTreeMap<String, Var>,
    labels: &BTreeMap<String, usize>,
) -> Result<Var> {
    for task in labels.keys() {
        if !logits.contains_key(task) {
            return Err(Error::Contract(format!(
                "label for task {task} without logits"
            )));
        }
    }
    let mut terms = Vec::new();
    for (task, &var) in logits {
        let Some(&target) = labels.get(task) else {
            continue;
        };
        let c = tape.shape(var).iter().product();
        let row = tape.reshape(var, &[1, c])?;
        terms.push(cross_entropy(tape, row, &[target])?);
    }
    if terms.is_empty() {
        // tie the zero to the logits so they still receive (zero) gradients
        let all: Vec<Var> = logits.values().copied().collect();
        let sums: Vec<Var> = all.iter().map(|&v| tape.sum(v)).collect();
        let zero = tape.constant(Tensor::scalar(0.0));
        let mut acc = zero;
        for s in sums {
            let z = tape.scale(s, 0.0);
            acc = tape.add(acc, z)?;
        }
        return Ok(acc);
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f32))
}

/// Resize-and-normalize transform producing backbone-sized inputs.
pub fn input_spec(backbone: &BackboneConfig) -> AugmentSpec {
    let (h, w) = backbone.image_size();
    AugmentSpec {
        out_height: h,
        out_width: w,
        ..AugmentSpec::eval_train(h)
    }
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Backbone plus linear head in inference mode.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: BackboneConfig,
    /// Backbone tensors and the `classifier.*` head.
    pub params: ParamStore,
    pub exec: Exec,
}

impl Classifier {
    pub fn new(backbone: BackboneConfig, params: ParamStore) -> Result<Self> {
        let classes = head_classes(&params)?;
        let d = params.get(HEAD_WEIGHT)?.shape()[0];
        if d != backbone.embed_dim() {
            return Err(Error::Checkpoint(format!(
                "head expects {d}-dim features, backbone gives {}",
                backbone.embed_dim()
            )));
        }
        if params.get(HEAD_BIAS)?.shape() != [classes] {
            return Err(Error::Checkpoint(format!(
                "{HEAD_BIAS} does not match {classes} classes"
            )));
        }
        Ok(Self {
            backbone,
            params,
            exec: Exec::Parallel,
        })
    }

    pub fn num_classes(&self) -> usize {
        head_classes(&self.params).expect("validated in new")
    }

    /// Class probabilities for a raw `[H, W, 3]` image in [0, 1].
    pub fn probs(&self, image: &Tensor) -> Result<Vec<f32>> {
        let x = eval_transform(image, &input_spec(&self.backbone));
        let mut tape = Tape::with_exec(Exec::Sequential);
        let bound = self.params.bind(&mut tape, false);
        let out = self.backbone.forward(&mut tape, &bound, &x)?;
        let d = self.backbone.embed_dim();
        let feat = tape.reshape(out.cls, &[1, d])?;
        let logits = classifier_logits(&mut tape, &bound, feat)?;
        let p = softmax(tape.data(logits));
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite class probabilities".into()));
        }
        Ok(p)
    }

    /// [`probs`](Self::probs) for every image, batch-parallel, in input order.
    pub fn probs_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f32>>> {
        par::map_indexed(images.len(), self.exec, |i| self.probs(&images[i]))
            .into_iter()
            .collect()
    }
}

/// Index of the largest probability, ties to the lower index.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn masked_loss_without_labels_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.param(&Tensor::new(&[2], vec![0.3, 0.1]).unwrap());
        let logits = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        let loss = masked_multilabel_loss(&mut tape, &logits, &BTreeMap::new()).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(b).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn confident_correct_logits_have_near_zero_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[3], vec![0.0, 40.0, 0.0]).unwrap());
        let logits = BTreeMap::from([("a".to_string(), a)]);
        let labels = BTreeMap::from([("a".to_string(), 1)]);
        let loss = masked_multilabel_loss(&mut tape, &logits, &labels).unwrap();
        assert!(tape.data(loss)[0] < 1e-6);
    }

    #[test]
    fn absent_task_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::new(&[2], vec![0.2, 0.7]).unwrap());
        let b = tape.param(&Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let logits = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        let labels = BTreeMap::from([("a".to_string(), 0)]);
        let loss = masked_multilabel_loss(&mut tape, &logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(b).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn classifier_rejects_mismatched_head() {
        let bb = BackboneConfig::Vit(crate::vit::VitConfig::tiny(16, 8, 8, 1, 2));
        let mut params = bb.init(&mut rng::seeded(0)).unwrap();
        params.extend(init_classifier(4, 2, &mut rng::seeded(1)).unwrap());
        assert!(matches!(
            Classifier::new(bb, params),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }
}

//! Class-token attention maps, top-q masks and overlay images.

use std::path::Path;

use crate::autodiff::Tape;
use crate::backbone::BackboneConfig;
use crate::data::augment::eval_transform;
use crate::data::image::{self, dims};
use crate::error::{Error, Result};
use crate::eval::classifier::input_spec;
use crate::par::Exec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_Q: f64 = 0.2;

/// Per-head attention of the class token over the patches of one layer,
/// `[heads, J]`, with the class-token column dropped and each row
/// renormalized to sum to one.
///
/// `attention` is the per-layer `[heads, N, N]` list a ViT forward records,
/// class token first; Vim records none.
pub fn cls_attention(attention: Option<&[Tensor]>, layer: usize) -> Result<Tensor> {
    let layers = attention.ok_or_else(|| {
        Error::Unsupported("attention maps need a ViT backbone; Vim has no attention matrix".into())
    })?;
    let a = layers.get(layer).ok_or_else(|| {
        Error::Contract(format!(
            "layer {layer} out of range for {} layers",
            layers.len()
        ))
    })?;
    let &[heads, n, n2] = a.shape() else {
        return Err(Error::Contract(format!(
            "attention has shape {:?}, expected [h, N, N]",
            a.shape()
        )));
    };
    if n != n2 || n < 2 {
        return Err(Error::Contract(format!(
            "attention has shape {:?}",
            a.shape()
        )));
    }
    let j = n - 1;
    let mut out = Vec::with_capacity(heads * j);
    for h in 0..heads {
        let row = &a.data()[h * n * n + 1..h * n * n + n];
        let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if total > 0.0 {
            out.extend(row.iter().map(|&v| (f64::from(v) / total) as f32));
        } else {
            out.extend(std::iter::repeat_n(1.0 / j as f32, j));
        }
    }
    Tensor::new(&[heads, j], out)
}

/// Arithmetic mean over heads of a `[heads, J]` map.
pub fn mean_over_heads(per_head: &Tensor) -> Vec<f32> {
    let (heads, j) = (per_head.shape()[0], per_head.shape()[1]);
    (0..j)
        .map(|p| {
            let s: f64 = (0..heads)
                .map(|h| f64::from(per_head.data()[h * j + p]))
                .sum();
            (s / heads as f64) as f32
        })
        .collect()
}

/// Number of patches kept for fraction `q` of `j`.
pub fn kept_count(q: f64, j: usize) -> usize {
    // guard against q·J landing a hair above an integer
    (((q * j as f64) - 1e-9).ceil().max(1.0) as usize).min(j)
}

/// Marks the `ceil(q·J)` highest-scoring patches; equal scores go to the
/// lower index.
pub fn threshold_top_q(map: &[f32], q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Precondition(format!(
            "q must lie in (0, 1], got {q}"
        )));
    }
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let mut mask = vec![false; map.len()];
    for &i in order.iter().take(kept_count(q, map.len())) {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayStyle {
    pub color: [f32; 3],
    pub alpha: f32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            color: [1.0, 0.0, 0.0],
            alpha: 0.45,
        }
    }
}

/// Pixel rectangle `(top, left, height, width)` of grid cell `(r, c)`.
fn cell(
    h: usize,
    w: usize,
    grid: (usize, usize),
    r: usize,
    c: usize,
) -> (usize, usize, usize, usize) {
    let top = r * h / grid.0;
    let left = c * w / grid.1;
    let bottom = (r + 1) * h / grid.0;
    let right = (c + 1) * w / grid.1;
    (top, left, bottom - top, right - left)
}

/// Blends `style.color` into every pixel of the masked patches.
pub fn tint(
    image: &Tensor,
    mask: &[bool],
    grid: (usize, usize),
    style: &OverlayStyle,
) -> Result<Tensor> {
    let (h, w, c) = dims(image);
    if mask.len() != grid.0 * grid.1 || grid.0 == 0 || grid.1 == 0 || grid.0 > h || grid.1 > w {
        return Err(Error::Precondition(format!(
            "mask of {} cells does not fit a {}x{} grid on a {h}x{w} image",
            mask.len(),
            grid.0,
            grid.1
        )));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (top, left, ch, cw) = cell(h, w, grid, idx / grid.1, idx % grid.1);
        for y in top..top + ch {
            for x in left..left + cw {
                let px = (y * w + x) * c;
                for k in 0..c.min(3) {
                    let v = &mut data[px + k];
                    *v = (1.0 - style.alpha) * *v + style.alpha * style.color[k];
                }
            }
        }
    }
    Ok(out)
}

/// Writes `image` with the masked patches tinted as a PNG.
pub fn render_overlay(
    image: &Tensor,
    mask: &[bool],
    grid: (usize, usize),
    style: &OverlayStyle,
    out_path: &Path,
) -> Result<()> {
    image::save(&tint(image, mask, grid, style)?, out_path)
}

/// One grayscale panel per head, each min-max scaled, side by side at
/// `cell_px` pixels per patch.
pub fn head_strip(per_head: &Tensor, grid: (usize, usize), cell_px: usize) -> Result<Tensor> {
    let (heads, j) = (per_head.shape()[0], per_head.shape()[1]);
    if j != grid.0 * grid.1 || cell_px == 0 {
        return Err(Error::Precondition(format!(
            "{j} patches do not fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let (ph, pw) = (grid.0 * cell_px, grid.1 * cell_px);
    let width = heads * pw;
    let mut out = Tensor::zeros(&[ph, width, 3]);
    let data = out.data_mut();
    for h in 0..heads {
        let row = &per_head.data()[h * j..(h + 1) * j];
        let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..ph {
            for x in 0..pw {
                let v = (row[(y / cell_px) * grid.1 + x / cell_px] - lo) / span;
                let px = (y * width + h * pw + x) * 3;
                data[px..px + 3].fill(v);
            }
        }
    }
    Ok(out)
}

/// Attention maps of one image and the mask derived from their mean.
#[derive(Clone, Debug)]
pub struct AttentionOverlay {
    /// The model-resolution image in [0, 1].
    pub image: Tensor,
    /// `[heads, J]`.
    pub per_head: Tensor,
    pub mean: Vec<f32>,
    pub mask: Vec<bool>,
    pub grid: (usize, usize),
    pub layer: usize,
}

/// Runs `image` through a ViT and thresholds the mean class-token attention
/// of `layer` (the last layer when `None`).
pub fn attention_overlay(
    backbone: &BackboneConfig,
    params: &ParamStore,
    image: &Tensor,
    layer: Option<usize>,
    q: f64,
) -> Result<AttentionOverlay> {
    let cfg = match backbone {
        BackboneConfig::Vit(c) => c,
        BackboneConfig::Vim(_) => {
            return Err(Error::Unsupported(
                "attention maps need a ViT backbone; Vim has no attention matrix".into(),
            ))
        }
    };
    let spec = input_spec(backbone);
    let resized = image::resize(image, spec.out_height, spec.out_width);
    let x = eval_transform(image, &spec);
    let mut tape = Tape::with_exec(Exec::Sequential);
    let bound = params.bind(&mut tape, false);
    let out = backbone.forward(&mut tape, &bound, &x)?;
    let layers = out.attention.as_deref();
    let layer = layer.unwrap_or_else(|| layers.map_or(0, |l| l.len().saturating_sub(1)));
    let per_head = cls_attention(layers, layer)?;
    let mean = mean_over_heads(&per_head);
    let mask = threshold_top_q(&mean, q)?;
    Ok(AttentionOverlay {
        image: resized,
        per_head,
        mean,
        mask,
        grid: cfg.grid(),
        layer,
    })
}

impl AttentionOverlay {
    /// Writes `<stem>.png` (tinted image) and `<stem>_heads.png` (per-head
    /// panels) into `dir`; returns both paths.
    pub fn write(
        &self,
        dir: &Path,
        stem: &str,
        style: &OverlayStyle,
    ) -> Result<[std::path::PathBuf; 2]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let overlay = dir.join(format!("{stem}.png"));
        let heads = dir.join(format!("{stem}_heads.png"));
        render_overlay(&self.image, &self.mask, self.grid, style, &overlay)?;
        let (h, _, _) = dims(&self.image);
        let cell_px = (h / self.grid.0).max(1);
        image::save(&head_strip(&self.per_head, self.grid, cell_px)?, &heads)?;
        Ok([overlay, heads])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_gives_uniform_map() {
        let n = 5;
        let a = Tensor::full(&[2, n, n], 1.0 / n as f32);
        let m = cls_attention(Some(std::slice::from_ref(&a)), 0).unwrap();
        assert_eq!(m.shape(), &[2, 4]);
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn vim_and_bad_layer_are_rejected() {
        assert!(matches!(cls_attention(None, 0), Err(Error::Unsupported(_))));
        let a = Tensor::full(&[1, 3, 3], 1.0 / 3.0);
        assert!(matches!(
            cls_attention(Some(&[a]), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn top_q_counts_and_ties() {
        let mask = threshold_top_q(&[0.0; 10], 0.2).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert!(mask[0] && mask[1]);
        let mask = threshold_top_q(&[0.1, 0.5, 0.2, 0.5], 0.5).unwrap();
        assert_eq!(mask, vec![false, true, false, true]);
        assert_eq!(kept_count(0.7, 10), 7);
        assert!(threshold_top_q(&[1.0], 0.0).is_err());
    }

    #[test]
    fn empty_and_full_masks() {
        let img = Tensor::full(&[4, 4, 3], 0.5);
        let style = OverlayStyle::default();
        assert_eq!(tint(&img, &[false; 4], (2, 2), &style).unwrap(), img);
        let full = tint(&img, &[true; 4], (2, 2), &style).unwrap();
        assert!(full.data().chunks(3).all(|p| p != [0.5, 0.5, 0.5]));
    }

    #[test]
    fn mean_is_exact() {
        let t = Tensor::new(&[2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        assert_eq!(mean_over_heads(&t), vec![0.4, 0.6]);
    }
}

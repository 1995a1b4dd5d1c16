//! Patch tokenization and positional embeddings shared by both backbones.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits an `[H, W, C]` image into `J` non-overlapping `P×P` patches.
///
/// Patches are ordered row-major over the patch grid; each patch is flattened
/// row-major as `(y, x, c)`, giving a `[J, P·P·C]` matrix.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::Config(format!(
            "image must be [H, W, C], got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, width], out)
}

/// Bilinear resampling matrix `[dh·dw, sh·sw]` mapping a positional grid of
/// `src` cells onto `dst` cells (half-pixel centers, edge clamped). Each row
/// sums to one.
pub fn grid_resample_matrix(src: (usize, usize), dst: (usize, usize)) -> Tensor {
    let (sh, sw) = src;
    let (dh, dw) = dst;
    let axis = |s: usize, d: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut m = vec![0.0f32; dh * dw * sh * sw];
    for i in 0..dh {
        let (y0, y1, fy) = axis(sh, dh, i);
        for j in 0..dw {
            let (x0, x1, fx) = axis(sw, dw, j);
            let row = &mut m[(i * dw + j) * sh * sw..(i * dw + j + 1) * sh * sw];
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    row[y * sw + x] += (wy * wx) as f32;
                }
            }
        }
    }
    Tensor::new(&[dh * dw, sh * sw], m).expect("resample shape")
}

/// Geometry of the learned positional table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub patch: usize,
    /// Patch grid the positional table was learned for.
    pub native_grid: (usize, usize),
    /// Where the class token sits in the native sequence.
    pub native_cls_index: usize,
    pub cls_at_middle: bool,
}

impl TokenLayout {
    pub fn cls_index(&self, patches: usize) -> usize {
        if self.cls_at_middle {
            patches / 2
        } else {
            0
        }
    }
}

/// Embeds an image into a `[(J+1), D]` token sequence:
/// projected patches, the class token inserted at its layout position, and the
/// positional table added elementwise (resampled when the patch grid differs
/// from the native one).
pub fn embed_tokens(
    tape: &mut Tape,
    layout: &TokenLayout,
    patch_proj: Var,
    cls: Var,
    pos: Var,
    image: &Tensor,
) -> Result<Var> {
    let patches = patchify(image, layout.patch)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let grid = (h / layout.patch, w / layout.patch);
    let j = grid.0 * grid.1;
    let pw = tape.shape(patch_proj)[0];
    if patches.shape()[1] != pw {
        return Err(Error::Config(format!(
            "patch width {} does not match projection input {pw}",
            patches.shape()[1]
        )));
    }
    let d = tape.shape(patch_proj)[1];
    let px = tape.constant(patches);
    let tokens = tape.matmul(px, patch_proj)?;
    let cls_row = tape.reshape(cls, &[1, d])?;
    let at = layout.cls_index(j);
    let seq = insert_row(tape, tokens, cls_row, at)?;

    let native_j = layout.native_grid.0 * layout.native_grid.1;
    if tape.shape(pos) != [native_j + 1, d] {
        return Err(Error::shape(
            "positional table",
            &[native_j + 1, d],
            tape.shape(pos),
        ));
    }
    let pos = if grid == layout.native_grid {
        pos
    } else {
        let nc = layout.native_cls_index;
        let pos_cls = tape.slice(pos, 0, nc, 1)?;
        let mut idx: Vec<usize> = (0..nc).collect();
        idx.extend(nc + 1..=native_j);
        let pos_patches = tape.rows(pos, &idx)?;
        let m = tape.constant(grid_resample_matrix(layout.native_grid, grid));
        let resampled = tape.matmul(m, pos_patches)?;
        insert_row(tape, resampled, pos_cls, at)?
    };
    tape.add(seq, pos)
}

/// Inserts a single `[1, D]` row before position `at` of `[n, D]` rows.
fn insert_row(tape: &mut Tape, rows: Var, row: Var, at: usize) -> Result<Var> {
    let n = tape.shape(rows)[0];
    let mut parts = Vec::with_capacity(3);
    if at > 0 {
        parts.push(tape.slice(rows, 0, 0, at)?);
    }
    parts.push(row);
    if at < n {
        parts.push(tape.slice(rows, 0, at, n - at)?);
    }
    tape.concat(&parts, 0)
}

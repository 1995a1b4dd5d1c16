//! Augmentation stacks: random resized crops, flips, color jitter, blur,
//! normalization, multi-crop view sets and the four overlapping crops.
//!
//! None of these functions look at labels.

use serde::{Deserialize, Serialize};

use super::image::{self as img, dims};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Retries before the random crop falls back to a centered window.
pub const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    /// Probability that jitter is applied at all.
    pub prob: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            prob: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Crop area as a fraction of the source image.
    pub scale: (f32, f32),
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: (f32, f32),
    pub out_height: usize,
    pub out_width: usize,
    pub flip_prob: f64,
    pub jitter: Option<ColorJitter>,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f32, f32),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentSpec {
    /// Global DINO view: scale 0.4–1.0, aspect 3/4–4/3.
    pub fn dino_global(size: usize, blur_prob: f64) -> Self {
        Self {
            scale: (0.4, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_height: size,
            out_width: size,
            flip_prob: 0.5,
            jitter: Some(ColorJitter::default()),
            grayscale_prob: 0.2,
            blur_prob,
            blur_sigma: (0.1, 2.0),
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    /// Local DINO view: scale 0.05–0.4.
    pub fn dino_local(size: usize) -> Self {
        Self {
            scale: (0.05, 0.4),
            ..Self::dino_global(size, 0.5)
        }
    }

    /// Downstream training: scale 0.08–1.0, aspect 1.0–1.6, flip, normalize.
    pub fn eval_train(size: usize) -> Self {
        Self {
            scale: (0.08, 1.0),
            ratio: (1.0, 1.6),
            out_height: size,
            out_width: size,
            flip_prob: 0.5,
            jitter: None,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale {lo}..{hi} outside (0, 1]"
            )));
        }
        let (rlo, rhi) = self.ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("aspect ratio {rlo}..{rhi} invalid")));
        }
        if self.out_height == 0 || self.out_width == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a window covering `scale` of the area with log-uniform aspect
/// `ratio`; after [`CROP_ATTEMPTS`] misses, falls back to the largest centered
/// window whose aspect is clamped into `ratio`.
pub fn sample_crop_window(
    height: usize,
    width: usize,
    scale: (f32, f32),
    ratio: (f32, f32),
    rng: &mut Rng,
) -> CropWindow {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (f64::from(ratio.0).ln(), f64::from(ratio.1).ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng::uniform_f64(rng, f64::from(scale.0), f64::from(scale.1));
        let aspect = rng::uniform_f64(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng::int_inclusive(rng, 0, height - h);
            let left = rng::int_inclusive(rng, 0, width - w);
            return CropWindow {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f32 / height as f32;
    let (w, h) = if in_ratio < ratio.0 {
        (
            width,
            ((width as f32 / ratio.0).round() as usize).clamp(1, height),
        )
    } else if in_ratio > ratio.1 {
        (
            ((height as f32 * ratio.1).round() as usize).clamp(1, width),
            height,
        )
    } else {
        (width, height)
    };
    CropWindow {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

pub fn random_resized_crop(image: &Tensor, spec: &AugmentSpec, rng: &mut Rng) -> Result<Tensor> {
    let (h, w, _) = dims(image);
    let win = sample_crop_window(h, w, spec.scale, spec.ratio, rng);
    let cropped = img::crop(image, win.top, win.left, win.height, win.width)?;
    Ok(img::resize(&cropped, spec.out_height, spec.out_width))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend(image: &mut Tensor, other: impl Fn(usize, f32) -> f32, factor: f32) {
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i, *v)).clamp(0.0, 1.0);
    }
}

fn grayscale_values(image: &Tensor) -> Vec<f32> {
    image
        .data()
        .chunks(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect()
}

pub fn adjust_brightness(image: &mut Tensor, factor: f32) {
    blend(image, |_, _| 0.0, factor);
}

pub fn adjust_contrast(image: &mut Tensor, factor: f32) {
    let gray = grayscale_values(image);
    let mean = gray.iter().map(|&v| f64::from(v)).sum::<f64>() as f32 / gray.len() as f32;
    blend(image, |_, _| mean, factor);
}

pub fn adjust_saturation(image: &mut Tensor, factor: f32) {
    let gray = grayscale_values(image);
    blend(image, |i, _| gray[i / 3], factor);
}

pub fn to_grayscale(image: &mut Tensor) {
    let gray = grayscale_values(image);
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        *v = gray[i / 3];
    }
}

/// Rotates hue by `shift` turns (`shift ∈ [-0.5, 0.5]`).
pub fn adjust_hue(image: &mut Tensor, shift: f32) {
    for px in image.data_mut().chunks_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let mut h = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        h = (h + shift).rem_euclid(1.0);
        let (s, v) = (delta / max, max);
        let sector = h * 6.0;
        let i = sector.floor();
        let f = sector - i;
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match i as i32 % 6 {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        px[0] = nr;
        px[1] = ng;
        px[2] = nb;
    }
}

pub fn color_jitter(image: &mut Tensor, jitter: &ColorJitter, rng: &mut Rng) {
    if !rng::bernoulli(rng, jitter.prob) {
        return;
    }
    let factor = |rng: &mut Rng, s: f32| rng::uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
    if jitter.brightness > 0.0 {
        let f = factor(rng, jitter.brightness);
        adjust_brightness(image, f);
    }
    if jitter.contrast > 0.0 {
        let f = factor(rng, jitter.contrast);
        adjust_contrast(image, f);
    }
    if jitter.saturation > 0.0 {
        let f = factor(rng, jitter.saturation);
        adjust_saturation(image, f);
    }
    if jitter.hue > 0.0 {
        let shift = rng::uniform(rng, -jitter.hue, jitter.hue);
        adjust_hue(image, shift);
    }
}

/// Separable Gaussian blur with edge clamping, kernel radius `⌈3σ⌉`.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Tensor {
    let (h, w, c) = dims(image);
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|k| (-((k * k) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|v| v / total).collect();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for (wi, &wk) in weights.iter().enumerate() {
                        let k = wi as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + k).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + k).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += wk * src[(yy * w + xx) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(image.data(), true);
    let out = pass(&tmp, false);
    Tensor::new(&[h, w, c], out).expect("blur shape")
}

pub fn normalize(image: &mut Tensor, mean: &[f32; 3], std: &[f32; 3]) {
    let c = dims(image).2;
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch % 3]) / std[ch % 3];
    }
}

/// Full per-view pipeline: crop, flip, jitter, grayscale, blur, normalize.
pub fn augment(image: &Tensor, spec: &AugmentSpec, rng: &mut Rng) -> Result<Tensor> {
    let mut view = random_resized_crop(image, spec, rng)?;
    if rng::bernoulli(rng, spec.flip_prob) {
        view = img::hflip(&view);
    }
    if let Some(j) = &spec.jitter {
        color_jitter(&mut view, j, rng);
    }
    if rng::bernoulli(rng, spec.grayscale_prob) {
        to_grayscale(&mut view);
    }
    if rng::bernoulli(rng, spec.blur_prob) {
        let sigma = rng::uniform(rng, spec.blur_sigma.0, spec.blur_sigma.1);
        view = gaussian_blur(&view, sigma);
    }
    normalize(&mut view, &spec.mean, &spec.std);
    Ok(view)
}

/// Deterministic evaluation transform: resize to the output size, normalize.
pub fn eval_transform(image: &Tensor, spec: &AugmentSpec) -> Tensor {
    let mut view = img::resize(image, spec.out_height, spec.out_width);
    normalize(&mut view, &spec.mean, &spec.std);
    view
}

/// Two global views and `n` local views of one source image.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub global: Vec<Tensor>,
    pub local: Vec<Tensor>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.global.len() + self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Globals first, then locals.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.global.iter().chain(&self.local)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiCropSpec {
    pub global: [AugmentSpec; 2],
    pub local: AugmentSpec,
    pub n_local: usize,
}

impl MultiCropSpec {
    pub fn dino(global_size: usize, local_size: usize, n_local: usize) -> Self {
        Self {
            global: [
                AugmentSpec::dino_global(global_size, 1.0),
                AugmentSpec::dino_global(global_size, 0.1),
            ],
            local: AugmentSpec::dino_local(local_size),
            n_local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.global[0].validate()?;
        self.global[1].validate()?;
        self.local.validate()
    }
}

pub fn make_views(image: &Tensor, spec: &MultiCropSpec, rng: &mut Rng) -> Result<ViewSet> {
    let global = spec
        .global
        .iter()
        .map(|s| augment(image, s, rng))
        .collect::<Result<Vec<_>>>()?;
    let local = (0..spec.n_local)
        .map(|_| augment(image, &spec.local, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { global, local })
}

pub const WIDE_CROP_WIDTH: usize = 372;
pub const WIDE_CROP_HEIGHT: usize = 256;

/// Top-left `(x, y)` offsets of the four corner-anchored windows.
pub fn overlapping_crop_offsets(
    width: usize,
    height: usize,
    crop_w: usize,
    crop_h: usize,
) -> Result<[(usize, usize); 4]> {
    if crop_w == 0 || crop_h == 0 || width < crop_w || height < crop_h {
        return Err(Error::Contract(format!(
            "image {width}x{height} smaller than {crop_w}x{crop_h} crop"
        )));
    }
    let (dx, dy) = (width - crop_w, height - crop_h);
    Ok([(0, 0), (dx, 0), (0, dy), (dx, dy)])
}

/// Four corner-anchored `crop_w × crop_h` windows, copied without resampling.
pub fn overlapping_crops(image: &Tensor, crop_w: usize, crop_h: usize) -> Result<[Tensor; 4]> {
    let (h, w, _) = dims(image);
    let offsets = overlapping_crop_offsets(w, h, crop_w, crop_h)?;
    let crop = |(x, y): (usize, usize)| img::crop(image, y, x, crop_h, crop_w);
    Ok([
        crop(offsets[0])?,
        crop(offsets[1])?,
        crop(offsets[2])?,
        crop(offsets[3])?,
    ])
}

/// 372×256 windows of a (nominally 640×440) image.
pub fn four_overlapping_crops(image: &Tensor) -> Result<[Tensor; 4]> {
    overlapping_crops(image, WIDE_CROP_WIDTH, WIDE_CROP_HEIGHT)
}

/// Largest centered square.
pub fn center_square_crop(image: &Tensor) -> Result<Tensor> {
    let (h, w, _) = dims(image);
    let side = h.min(w);
    img::crop(image, (h - side) / 2, (w - side) / 2, side, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut rng::seeded(seed))
    }

    #[test]
    fn unit_scale_and_ratio_is_full_resize() {
        let image = noise(20, 20, 1);
        let spec = AugmentSpec {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            ..AugmentSpec::eval_train(10)
        };
        let out = random_resized_crop(&image, &spec, &mut rng::seeded(2)).unwrap();
        assert_eq!(out, img::resize(&image, 10, 10));
    }

    #[test]
    fn output_shape_contract() {
        let image = noise(44, 64, 3);
        let spec = AugmentSpec::dino_global(24, 1.0);
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let v = augment(&image, &spec, &mut r).unwrap();
            assert_eq!(v.shape(), &[24, 24, 3]);
        }
    }

    #[test]
    fn crop_windows_respect_bounds() {
        let mut r = rng::seeded(5);
        for _ in 0..500 {
            let w = sample_crop_window(440, 640, (0.05, 1.0), (0.75, 4.0 / 3.0), &mut r);
            assert!(w.top + w.height <= 440 && w.left + w.width <= 640);
            assert!(w.height > 0 && w.width > 0);
        }
    }

    #[test]
    fn impossible_ratio_falls_back_to_center() {
        // 1×10 strip cannot host any window with aspect ≤ 1 and area ≥ 90%
        let w = sample_crop_window(1, 10, (0.9, 1.0), (0.5, 1.0), &mut rng::seeded(1));
        assert_eq!(
            w,
            CropWindow {
                top: 0,
                left: 4,
                height: 1,
                width: 1
            }
        );
    }

    #[test]
    fn jitter_ops_preserve_gray() {
        let mut gray = Tensor::full(&[3, 3, 3], 0.4);
        adjust_saturation(&mut gray, 0.0);
        adjust_hue(&mut gray, 0.3);
        adjust_contrast(&mut gray, 1.7);
        assert!(gray.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let image = noise(4, 4, 7);
        let mut rotated = image.clone();
        adjust_hue(&mut rotated, 0.5);
        adjust_hue(&mut rotated, 0.5);
        for (a, b) in rotated.data().iter().zip(image.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_keeps_constants() {
        let image = Tensor::full(&[8, 8, 3], 0.7);
        let b = gaussian_blur(&image, 1.5);
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-5));
    }

    #[test]
    fn view_set_sizes() {
        let image = noise(44, 64, 8);
        let spec = MultiCropSpec::dino(16, 8, 8);
        let views = make_views(&image, &spec, &mut rng::seeded(9)).unwrap();
        assert_eq!((views.global.len(), views.local.len()), (2, 8));
        assert_eq!(views.global[0].shape(), &[16, 16, 3]);
        assert_eq!(views.local[0].shape(), &[8, 8, 3]);
        let again = make_views(&image, &spec, &mut rng::seeded(9)).unwrap();
        assert!(views.iter().zip(again.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn overlapping_crop_geometry() {
        let offsets = overlapping_crop_offsets(640, 440, 372, 256).unwrap();
        assert_eq!(offsets, [(0, 0), (268, 0), (0, 184), (268, 184)]);
        assert!(overlapping_crop_offsets(300, 440, 372, 256).is_err());
        let image = noise(256, 372, 10);
        for c in four_overlapping_crops(&image).unwrap() {
            assert_eq!(c, image);
        }
    }
}

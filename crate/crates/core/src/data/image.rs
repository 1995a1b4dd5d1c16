//! `[H, W, C]` float images in `[0, 1]`: decode, encode and resampling.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes PNG or binary PPM (P6) into an `[H, W, 3]` tensor.
pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer shape")
}

pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Contract(format!("expected an RGB image, got {s:?}")));
    }
    let raw = image.data().iter().map(|&v| quantize(v)).collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(s[1] as u32, s[0] as u32, raw)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes as PNG (or PPM when the extension is `.ppm`).
pub fn save(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_rgb8(&to_rgb8(image)?, path)
}

pub fn save_rgb8(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

pub fn dims(image: &Tensor) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

/// Copies the window with top-left `(top, left)` and size `height × width`.
pub fn crop(
    image: &Tensor,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (h, w, c) = dims(image);
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::Contract(format!(
            "crop {height}x{width}@({top},{left}) outside {h}x{w} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(height * width * c);
    for y in top..top + height {
        let start = (y * w + left) * c;
        out.extend_from_slice(&src[start..start + width * c]);
    }
    Tensor::new(&[height, width, c], out)
}

/// Bilinear resize with half-pixel centers.
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w, c) = dims(image);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let coord = |i: usize, inp: usize, out: usize| -> (usize, usize, f32) {
        let pos = ((i as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(inp - 1), pos - lo as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = vec![0.0f32; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out).expect("resize shape")
}

pub fn hflip(image: &Tensor) -> Tensor {
    let (h, w, c) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let at = (y * w + x) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    Tensor::new(&[h, w, c], out).expect("flip shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_u8_grid() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 5 * 3)
            .map(|i| (i * 7 % 256) as f32 / 255.0)
            .collect();
        let img = Tensor::new(&[4, 5, 3], data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            save(&img, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::full(&[6, 9, 3], 0.25);
        assert_eq!(resize(&img, 6, 9), img);
        let r = resize(&img, 4, 4);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn crop_bounds() {
        let img = Tensor::zeros(&[4, 4, 3]);
        assert!(crop(&img, 2, 2, 2, 2).is_ok());
        assert!(crop(&img, 3, 0, 2, 2).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Tensor::new(&[2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(hflip(&img).data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(hflip(&hflip(&img)), img);
    }
}

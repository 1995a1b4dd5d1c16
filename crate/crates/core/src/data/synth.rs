//! Deterministic synthetic corpora so every workflow runs without external data.
//!
//! * separable: bright (mean 0.7) versus dark (mean 0.3) noisy images
//! * noise: smooth random fields with a few colored blobs, unlabeled in spirit
//! * planted: wide street-like frames where positives contain a thin red pole
//!   that may sit near either edge, outside a centered crop
//! * benchmark: path-only label manifests with the class totals of the four
//!   street-view tasks, for split bookkeeping

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, Record};
use super::image;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const SEPARABLE_TASK: &str = "bright";
pub const PLANTED_TASK: &str = "object";

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Uniform-gray image around `mean` with per-pixel noise of half-width 0.15.
pub fn separable_image(height: usize, width: usize, bright: bool, rng: &mut Rng) -> Tensor {
    let mean = if bright { 0.7 } else { 0.3 };
    let data = (0..height * width * 3)
        .map(|_| clamp01(mean + rng::uniform(rng, -0.15, 0.15)))
        .collect();
    Tensor::new(&[height, width, 3], data).expect("separable shape")
}

/// Low-frequency random field (bilinear upsampled 4×4 grid) plus pixel noise
/// and up to three colored rectangles.
pub fn noise_image(height: usize, width: usize, rng: &mut Rng) -> Tensor {
    let coarse = Tensor::uniform(&[4, 4, 3], 0.1, 0.9, rng);
    let mut img = image::resize(&coarse, height, width);
    for v in img.data_mut() {
        *v = clamp01(*v + rng::uniform(rng, -0.05, 0.05));
    }
    let blobs = rng::int_inclusive(rng, 0, 3);
    for _ in 0..blobs {
        let color = [
            rng.random::<f32>(),
            rng.random::<f32>(),
            rng.random::<f32>(),
        ];
        let bh = rng::int_inclusive(rng, 1, (height / 3).max(1));
        let bw = rng::int_inclusive(rng, 1, (width / 3).max(1));
        let top = rng::int_inclusive(rng, 0, height - bh);
        let left = rng::int_inclusive(rng, 0, width - bw);
        fill_rect(
            &mut img,
            Rect {
                top,
                left,
                height: bh,
                width: bw,
            },
            color,
        );
    }
    img
}

/// Oriented sinusoidal grating with a per-image angle, period and phase plus
/// pixel noise. Orientation and period survive cropping, flips, color jitter
/// and blur, so views of one image stay recognizably related.
pub fn grating_image(height: usize, width: usize, rng: &mut Rng) -> Tensor {
    let angle = rng::uniform(rng, 0.0, std::f32::consts::PI);
    let period = rng::uniform(rng, 6.0, 16.0);
    let phase = rng::uniform(rng, 0.0, std::f32::consts::TAU);
    let tint = [
        rng.random::<f32>(),
        rng.random::<f32>(),
        rng.random::<f32>(),
    ];
    let (s, c) = angle.sin_cos();
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let t = (x as f32 * c + y as f32 * s) * std::f32::consts::TAU / period + phase;
            let wave = 0.5 + 0.35 * t.sin();
            for ch in tint {
                data.push(clamp01(
                    0.7 * wave + 0.3 * ch + rng::uniform(rng, -0.05, 0.05),
                ));
            }
        }
    }
    Tensor::new(&[height, width, 3], data).expect("grating shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let y0 = self.top.max(other.top);
        let y1 = (self.top + self.height).min(other.top + other.height);
        let x0 = self.left.max(other.left);
        let x1 = (self.left + self.width).min(other.left + other.width);
        y1.saturating_sub(y0) * x1.saturating_sub(x0)
    }

    /// Fraction of `self` lying inside `window`.
    pub fn visible_fraction(&self, window: &Rect) -> f64 {
        self.intersection_area(window) as f64 / self.area().max(1) as f64
    }
}

fn fill_rect(img: &mut Tensor, r: Rect, color: [f32; 3]) {
    let w = img.shape()[1];
    let data = img.data_mut();
    for y in r.top..r.top + r.height {
        for x in r.left..r.left + r.width {
            let px = (y * w + x) * 3;
            data[px..px + 3].copy_from_slice(&color);
        }
    }
}

/// Geometry of the planted-object task. Defaults scale a 640×440 frame with
/// 372×256 windows down by four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub width: usize,
    pub height: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub pole_width: usize,
    pub pole_height: usize,
    pub distractors: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 110,
            crop_width: 93,
            crop_height: 64,
            pole_width: 8,
            pole_height: 40,
            distractors: 3,
        }
    }
}

impl PlantedSpec {
    /// The centered `crop_width × crop_height` window.
    pub fn center_window(&self) -> Rect {
        Rect {
            top: (self.height - self.crop_height) / 2,
            left: (self.width - self.crop_width) / 2,
            height: self.crop_height,
            width: self.crop_width,
        }
    }
}

/// A planted-object frame and the pole rectangle (positives only).
#[derive(Clone, Debug)]
pub struct PlantedSample {
    pub image: Tensor,
    pub pole: Option<Rect>,
}

pub fn planted_image(spec: &PlantedSpec, positive: bool, rng: &mut Rng) -> PlantedSample {
    let (h, w) = (spec.height, spec.width);
    let mut img = Tensor::zeros(&[h, w, 3]);
    // sky over road, with mild noise
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let y = i / (w * 3);
        let base = if y < h / 2 { 0.55 } else { 0.35 };
        *v = clamp01(base + rng::uniform(rng, -0.08, 0.08));
    }
    for _ in 0..spec.distractors {
        // green and blue boxes; never red
        let color = if rng::bernoulli(rng, 0.5) {
            [0.2, rng::uniform(rng, 0.5, 0.8), 0.2]
        } else {
            [0.2, 0.3, rng::uniform(rng, 0.5, 0.8)]
        };
        let bh = rng::int_inclusive(rng, 6, 20);
        let bw = rng::int_inclusive(rng, 6, 20);
        let r = Rect {
            top: rng::int_inclusive(rng, 0, h - bh),
            left: rng::int_inclusive(rng, 0, w - bw),
            height: bh,
            width: bw,
        };
        fill_rect(&mut img, r, color);
    }
    let pole = positive.then(|| {
        let r = Rect {
            top: rng::int_inclusive(rng, 0, h - spec.pole_height),
            left: rng::int_inclusive(rng, 0, w - spec.pole_width),
            height: spec.pole_height,
            width: spec.pole_width,
        };
        fill_rect(&mut img, r, [0.9, 0.1, 0.1]);
        r
    });
    PlantedSample { image: img, pole }
}

/// Random `crop_width × crop_height` windows of planted frames labeled by
/// whether at least half of the pole is inside. Used to train window-level
/// detectors.
pub fn planted_windows(
    spec: &PlantedSpec,
    n: usize,
    positive_rate: f64,
    rng: &mut Rng,
) -> Vec<(Tensor, bool)> {
    (0..n)
        .map(|_| {
            let positive = rng::bernoulli(rng, positive_rate);
            planted_window(spec, positive, rng)
        })
        .collect()
}

/// One random window of a frame drawn with or without a pole.
pub fn planted_window(spec: &PlantedSpec, positive: bool, rng: &mut Rng) -> (Tensor, bool) {
    let s = planted_image(spec, positive, rng);
    let win = Rect {
        top: rng::int_inclusive(rng, 0, spec.height - spec.crop_height),
        left: rng::int_inclusive(rng, 0, spec.width - spec.crop_width),
        height: spec.crop_height,
        width: spec.crop_width,
    };
    let crop = image::crop(&s.image, win.top, win.left, win.height, win.width)
        .expect("window inside frame");
    let label = s.pole.is_some_and(|p| p.visible_fraction(&win) >= 0.5);
    (crop, label)
}

/// Per-class totals of the street-view benchmark tasks.
pub const BENCHMARK_TASKS: &[(&str, &[(u32, usize)])] = &[
    ("streetlight", &[(0, 15_792), (1, 2_144)]),
    ("nsh", &[(0, 5_528), (1, 7_241), (9, 757)]),
    ("green30", &[(0, 4_162), (1, 9_344)]),
    ("sidewalk", &[(0, 13_773), (1, 4_139)]),
];

pub fn benchmark_totals(task: &str) -> Result<&'static [(u32, usize)]> {
    BENCHMARK_TASKS
        .iter()
        .find(|(t, _)| *t == task)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Config(format!("unknown benchmark task {task:?}")))
}

/// Path-only dataset with the class totals of `task` (no image files).
pub fn benchmark_dataset(task: &str) -> Result<LabeledDataset> {
    let totals = benchmark_totals(task)?;
    let mut records = Vec::new();
    for &(label, n) in totals {
        for k in 0..n {
            records.push(Record {
                path: format!("{task}/{label}/{k:05}.png"),
                labels: BTreeMap::from([(task.to_string(), label)]),
            });
        }
    }
    let alphabet = totals.iter().map(|&(l, _)| l).collect();
    LabeledDataset::new(records, BTreeMap::from([(task.to_string(), alphabet)]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    Separable,
    Noise,
    /// Full frames labeled by pole presence.
    Planted,
    /// Crop-sized windows of planted frames, labeled positive when at least
    /// half of the pole is inside.
    PlantedWindows,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "noise" => Ok(Self::Noise),
            "planted" => Ok(Self::Planted),
            "planted-windows" => Ok(Self::PlantedWindows),
            _ => Err(Error::Config(format!(
                "unknown corpus {s:?} (separable, noise, planted, planted-windows)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub count: usize,
    /// Frame size for separable and noise corpora.
    pub size: usize,
    /// Fraction of positives (separable and planted).
    pub positive_rate: f64,
    pub seed: u64,
}

/// Writes `count` PNGs plus `labels.csv` into `dir` and returns the dataset.
///
/// Each image is drawn from its own derived seed, so a corpus is stable under
/// any change in generation order.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<LabeledDataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let planted = PlantedSpec::default();
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut r = rng::seeded(rng::derive_seed(spec.seed, i as u64));
        let positive = rng::bernoulli(&mut r, spec.positive_rate);
        let (img, labels) = match spec.kind {
            CorpusKind::Separable => (
                separable_image(spec.size, spec.size, positive, &mut r),
                BTreeMap::from([(SEPARABLE_TASK.to_string(), u32::from(positive))]),
            ),
            CorpusKind::Noise => (noise_image(spec.size, spec.size, &mut r), BTreeMap::new()),
            CorpusKind::Planted => (
                planted_image(&planted, positive, &mut r).image,
                BTreeMap::from([(PLANTED_TASK.to_string(), u32::from(positive))]),
            ),
            CorpusKind::PlantedWindows => {
                let (img, label) = planted_window(&planted, positive, &mut r);
                (
                    img,
                    BTreeMap::from([(PLANTED_TASK.to_string(), u32::from(label))]),
                )
            }
        };
        let name = format!("img_{i:05}.png");
        image::save(&img, dir.join(&name))?;
        records.push(Record { path: name, labels });
    }
    let mut alphabets = BTreeMap::new();
    match spec.kind {
        CorpusKind::Separable => {
            alphabets.insert(SEPARABLE_TASK.to_string(), vec![0, 1]);
        }
        CorpusKind::Planted | CorpusKind::PlantedWindows => {
            alphabets.insert(PLANTED_TASK.to_string(), vec![0, 1]);
        }
        CorpusKind::Noise => {}
    }
    let mut ds = LabeledDataset::new(records, alphabets)?;
    ds.root = dir.to_path_buf();
    match spec.kind {
        CorpusKind::Noise => write_image_list(dir, &ds)?,
        _ => ds.write_manifest(&dir.join("labels.csv"))?,
    }
    Ok(ds)
}

/// Unlabeled corpora get a plain `path` list instead of a label manifest.
fn write_image_list(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    let path = dir.join("images.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Contract(e.to_string()))?;
    w.write_record(["path"])?;
    for r in &ds.records {
        w.write_record([&r.path])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads image paths from either a label manifest (`path,task,label`) or a
/// plain `path` list.
pub fn read_image_list(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == "path")
        .ok_or_else(|| Error::Contract(format!("{}: no path column", path.display())))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let p = row.get(col).unwrap_or_default().to_string();
        if seen.insert(p.clone()) {
            out.push(root.join(p));
        }
    }
    Ok(out)
}

//! Positive data: 2-D toy sets, texture crops, image folders, and
//! procedurally rendered digits. Every emitted value lies in `[-1, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, WinnError};
use crate::image_io;
use crate::tensor::Tensor;
use crate::train::BatchSource;

/// What to generate or load.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `modes` isotropic Gaussians evenly spaced on a circle of `radius`,
    /// starting at 45°.
    Mixture {
        count: usize,
        modes: usize,
        radius: f64,
        std: f64,
    },
    /// Points on a circle of `radius` with Gaussian radial noise.
    Ring { count: usize, radius: f64, std: f64 },
    /// Random `crop`×`crop` patches of one procedurally generated image.
    Texture {
        pattern: TexturePattern,
        size: usize,
        crop: usize,
    },
    /// Random `crop`×`crop` patches of an image file.
    TextureFile { path: PathBuf, crop: usize },
    /// Every PNG/PGM in a directory, all of size `size`×`size`.
    ImageFolder {
        path: PathBuf,
        size: usize,
        #[serde(default)]
        grayscale: bool,
    },
    /// Rendered digit glyphs, `train` + `test` samples at `size`×`size`.
    Digits { train: usize, test: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexturePattern {
    Stripes,
    Checker,
    Cells,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Samples { data: Tensor, labels: Option<Vec<usize>> },
    Crops { image: Tensor, crop: usize },
}

/// A positive-sample source with a fixed item shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub item_shape: Vec<usize>,
    pub source: Source,
}

impl Dataset {
    pub fn from_samples(data: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.shape().is_empty() || data.batch() == 0 {
            return Err(WinnError::config("dataset is empty"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != data.batch()) {
            return Err(WinnError::config("label count does not match sample count"));
        }
        Ok(Dataset {
            item_shape: data.shape()[1..].to_vec(),
            source: Source::Samples { data, labels },
        })
    }

    pub fn from_image(image: Tensor, crop: usize) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || crop == 0 || s[1] < crop || s[2] < crop {
            return Err(WinnError::config(format!("cannot crop {crop}×{crop} patches from image {s:?}")));
        }
        Ok(Dataset {
            item_shape: vec![s[0], crop, crop],
            source: Source::Crops { image, crop },
        })
    }

    /// Distinct items (or crop positions).
    pub fn len(&self) -> usize {
        match &self.source {
            Source::Samples { data, .. } => data.batch(),
            Source::Crops { image, crop } => (image.shape()[1] - crop + 1) * (image.shape()[2] - crop + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Option<&Tensor> {
        match &self.source {
            Source::Samples { data, .. } => Some(data),
            Source::Crops { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.source {
            Source::Samples { labels, .. } => labels.as_deref(),
            Source::Crops { .. } => None,
        }
    }

    /// `count` uniform draws with replacement (random crop positions for
    /// textures).
    pub fn batch(&self, count: usize, rng: &mut dyn RngCore) -> Tensor {
        match &self.source {
            Source::Samples { data, .. } => {
                let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..data.batch())).collect();
                data.gather(&idx)
            }
            Source::Crops { image, crop } => {
                let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
                let k = *crop;
                let mut out = Vec::with_capacity(count * c * k * k);
                for _ in 0..count {
                    let r0 = rng.random_range(0..=h - k);
                    let c0 = rng.random_range(0..=w - k);
                    for ch in 0..c {
                        for r in 0..k {
                            let row = (ch * h + r0 + r) * w + c0;
                            out.extend_from_slice(&image.data()[row..row + k]);
                        }
                    }
                }
                Tensor::new(vec![count, c, k, k], out).expect("crop batch shape")
            }
        }
    }
}

impl BatchSource for Dataset {
    fn next_batch(&mut self, count: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        Ok(self.batch(count, rng))
    }
}

/// Divides by the largest coordinate magnitude when it exceeds 1.
fn fit_unit_box(mut t: Tensor) -> Tensor {
    let m = t.max_abs();
    if m > 1.0 {
        t.data_mut().iter_mut().for_each(|v| *v /= m);
    }
    t
}

pub fn mixture(count: usize, modes: usize, radius: f64, std: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    if modes == 0 || count == 0 || !(std >= 0.0) {
        return Err(WinnError::config("mixture needs count ≥ 1, modes ≥ 1, std ≥ 0"));
    }
    let noise = Normal::new(0.0, std).map_err(|e| WinnError::config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * count);
    for i in 0..count {
        let a = PI / 4.0 + 2.0 * PI * (i % modes) as f64 / modes as f64;
        data.push(radius * a.cos() + noise.sample(rng));
        data.push(radius * a.sin() + noise.sample(rng));
    }
    Ok(fit_unit_box(Tensor::new(vec![count, 2], data)?))
}

pub fn ring(count: usize, radius: f64, std: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    if count == 0 || !(std >= 0.0) {
        return Err(WinnError::config("ring needs count ≥ 1 and std ≥ 0"));
    }
    let noise = Normal::new(0.0, std).map_err(|e| WinnError::config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let a = rng.random_range(0.0..2.0 * PI);
        let r = radius + noise.sample(rng);
        data.push(r * a.cos());
        data.push(r * a.sin());
    }
    Ok(fit_unit_box(Tensor::new(vec![count, 2], data)?))
}

/// A `[3, size, size]` RGB texture in `[-1, 1]`.
pub fn procedural_texture(pattern: TexturePattern, size: usize, rng: &mut dyn RngCore) -> Tensor {
    let n = size * size;
    let mut img = vec![0.0; 3 * n];
    let jitter = Normal::new(0.0, 0.05).expect("valid");
    match pattern {
        TexturePattern::Stripes => {
            let angle = rng.random_range(0.0..PI);
            let period = rng.random_range(8.0..16.0);
            let (ca, sa) = (angle.cos(), angle.sin());
            for r in 0..size {
                for c in 0..size {
                    let t = (2.0 * PI * (c as f64 * ca + r as f64 * sa) / period).sin();
                    for (ch, tint) in [0.9, 0.4, -0.3].iter().enumerate() {
                        img[ch * n + r * size + c] = 0.8 * t * tint + jitter.sample(rng);
                    }
                }
            }
        }
        TexturePattern::Checker => {
            let cell = rng.random_range(6..12);
            for r in 0..size {
                for c in 0..size {
                    let on = ((r / cell) + (c / cell)) % 2 == 0;
                    for (ch, (a, b)) in [(0.8, -0.6), (0.2, -0.2), (-0.5, 0.7)].iter().enumerate() {
                        img[ch * n + r * size + c] = if on { *a } else { *b } + jitter.sample(rng);
                    }
                }
            }
        }
        TexturePattern::Cells => {
            let k = (n / 256).max(4);
            let seeds: Vec<(f64, f64, [f64; 3])> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(0.0..size as f64),
                        rng.random_range(0.0..size as f64),
                        [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)],
                    )
                })
                .collect();
            for r in 0..size {
                for c in 0..size {
                    let (mut best, mut second, mut col) = (f64::INFINITY, f64::INFINITY, [0.0; 3]);
                    for (sy, sx, color) in &seeds {
                        // Toroidal distance keeps the texture seamless.
                        let dy = (r as f64 - sy).abs().min(size as f64 - (r as f64 - sy).abs());
                        let dx = (c as f64 - sx).abs().min(size as f64 - (c as f64 - sx).abs());
                        let d = (dy * dy + dx * dx).sqrt();
                        if d < best {
                            second = best;
                            best = d;
                            col = *color;
                        } else if d < second {
                            second = d;
                        }
                    }
                    let edge = ((second - best) / 3.0).min(1.0);
                    for ch in 0..3 {
                        img[ch * n + r * size + c] = col[ch] * edge - (1.0 - edge) * 0.9 + jitter.sample(rng);
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], img).expect("texture shape").clamp(-1.0, 1.0)
}

/// Loads every `.png`/`.pgm` in `dir` (sorted by file name).
pub fn image_folder(dir: &Path, size: usize, grayscale: bool) -> Result<Tensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| WinnError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| image_io::Format::from_path(p).is_ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(WinnError::config(format!("{}: no PNG or PGM images", dir.display())));
    }
    let c = if grayscale { 1 } else { 3 };
    let mut data = Vec::new();
    for p in &paths {
        let img = image_io::read_image(p)?;
        if img.shape()[1] != size || img.shape()[2] != size {
            return Err(WinnError::config(format!(
                "{}: image is {}×{}, expected {size}×{size}",
                p.display(),
                img.shape()[2],
                img.shape()[1]
            )));
        }
        let img = match (img.shape()[0], c) {
            (a, b) if a == b => img,
            (3, 1) => {
                let n = size * size;
                Tensor::from_fn(&[1, size, size], |i| {
                    let d = img.data();
                    (d[i] + d[n + i] + d[2 * n + i]) / 3.0
                })
            }
            (1, 3) => {
                let d = img.data();
                Tensor::from_fn(&[3, size, size], |i| d[i % (size * size)])
            }
            _ => unreachable!("decoders emit 1 or 3 channels"),
        };
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![paths.len(), c, size, size], data)
}

// ---- digits ---------------------------------------------------------------

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    (0..=20)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 20.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Polyline strokes of each digit in a unit box (x right, y down).
fn glyph(d: usize) -> Vec<Vec<(f64, f64)>> {
    match d {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.4)],
        1 => vec![vec![(0.35, 0.22), (0.52, 0.08), (0.52, 0.92)]],
        2 => vec![vec![
            (0.22, 0.3),
            (0.3, 0.14),
            (0.5, 0.08),
            (0.7, 0.14),
            (0.76, 0.3),
            (0.68, 0.48),
            (0.22, 0.92),
            (0.8, 0.92),
        ]],
        3 => vec![vec![
            (0.22, 0.12),
            (0.75, 0.12),
            (0.45, 0.45),
            (0.7, 0.53),
            (0.78, 0.72),
            (0.65, 0.9),
            (0.45, 0.93),
            (0.22, 0.85),
        ]],
        4 => vec![vec![(0.66, 0.92), (0.66, 0.08), (0.18, 0.65), (0.85, 0.65)]],
        5 => vec![vec![
            (0.76, 0.1),
            (0.3, 0.1),
            (0.26, 0.45),
            (0.55, 0.4),
            (0.75, 0.55),
            (0.75, 0.78),
            (0.55, 0.92),
            (0.24, 0.87),
        ]],
        6 => vec![vec![
            (0.7, 0.1),
            (0.42, 0.28),
            (0.26, 0.58),
            (0.3, 0.84),
            (0.5, 0.93),
            (0.72, 0.8),
            (0.72, 0.6),
            (0.5, 0.5),
            (0.27, 0.6),
        ]],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.42, 0.92)]],
        8 => vec![ellipse(0.5, 0.29, 0.21, 0.2), ellipse(0.5, 0.7, 0.26, 0.22)],
        9 => vec![ellipse(0.5, 0.32, 0.24, 0.22), vec![(0.74, 0.32), (0.62, 0.92)]],
        _ => unreachable!("digits are 0..=9"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Size of the canvas digits are drawn on before downsampling.
pub const DIGIT_CANVAS: usize = 28;

/// Renders digit `d` on a 28×28 canvas with a random similarity transform
/// and stroke width; values in `[0, 1]`.
fn render_digit(d: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let n = DIGIT_CANVAS as f64;
    let scale = rng.random_range(0.62..0.78) * n;
    let angle = rng.random_range(-0.25..0.25);
    let shear = rng.random_range(-0.15..0.15);
    let (tx, ty) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let width = rng.random_range(1.0..1.9);
    let (ca, sa) = (f64::cos(angle), f64::sin(angle));
    let map = |(x, y): (f64, f64)| {
        let (u, v) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        (n / 2.0 + tx + scale * (ca * u - sa * v), n / 2.0 + ty + scale * (sa * u + ca * v))
    };
    let strokes: Vec<Vec<(f64, f64)>> = glyph(d).into_iter().map(|s| s.into_iter().map(map).collect()).collect();
    let mut img = vec![0.0; DIGIT_CANVAS * DIGIT_CANVAS];
    for r in 0..DIGIT_CANVAS {
        for c in 0..DIGIT_CANVAS {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let mut best = f64::INFINITY;
            for s in &strokes {
                for w in s.windows(2) {
                    best = best.min(segment_distance(p, w[0], w[1]));
                }
            }
            img[r * DIGIT_CANVAS + c] = (1.0 - (best - width)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Block-average downsampling of a 28×28 canvas to `size` (a divisor of 28).
fn downsample(img: &[f64], size: usize) -> Vec<f64> {
    let f = DIGIT_CANVAS / size;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut s = 0.0;
            for i in 0..f {
                for j in 0..f {
                    s += img[(r * f + i) * DIGIT_CANVAS + c * f + j];
                }
            }
            out[r * size + c] = s / (f * f) as f64;
        }
    }
    out
}

/// `count` rendered digits (labels cycling 0–9, then shuffled) as
/// `[count, 1, size, size]` in `[-1, 1]`. `size` must divide 28.
pub fn digits(count: usize, size: usize, rng: &mut dyn RngCore) -> Result<(Tensor, Vec<usize>)> {
    if size == 0 || DIGIT_CANVAS % size != 0 {
        return Err(WinnError::config(format!("dataset.size {size} must divide {DIGIT_CANVAS}")));
    }
    let mut labels: Vec<usize> = (0..count).map(|i| i % 10).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(count * size * size);
    for &y in &labels {
        let img = downsample(&render_digit(y, rng), size);
        data.extend(img.into_iter().map(|v| 2.0 * v - 1.0));
    }
    Ok((Tensor::new(vec![count, 1, size, size], data)?, labels))
}

/// A labeled train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds the positive set. For digits this is the training split; use
/// [`make_split`] for both.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        DatasetSpec::Mixture {
            count,
            modes,
            radius,
            std,
        } => Dataset::from_samples(mixture(*count, *modes, *radius, *std, &mut rng)?, None),
        DatasetSpec::Ring { count, radius, std } => Dataset::from_samples(ring(*count, *radius, *std, &mut rng)?, None),
        DatasetSpec::Texture { pattern, size, crop } => {
            Dataset::from_image(procedural_texture(*pattern, *size, &mut rng), *crop)
        }
        DatasetSpec::TextureFile { path, crop } => Dataset::from_image(image_io::read_image(path)?, *crop),
        DatasetSpec::ImageFolder { path, size, grayscale } => {
            Dataset::from_samples(image_folder(path, *size, *grayscale)?, None)
        }
        DatasetSpec::Digits { .. } => Ok(make_split(spec, seed)?.train),
    }
}

/// Train and test digit sets drawn from independent streams of `seed`.
pub fn make_split(spec: &DatasetSpec, seed: u64) -> Result<LabeledSplit> {
    let DatasetSpec::Digits { train, test, size } = spec else {
        return Err(WinnError::config("only the digits dataset has a labeled split"));
    };
    let mut r_train = ChaCha8Rng::seed_from_u64(seed);
    let mut r_test = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57_7E57_7E57_7E57);
    let (xt, yt) = digits(*train, *size, &mut r_train)?;
    let (xs, ys) = digits(*test, *size, &mut r_test)?;
    Ok(LabeledSplit {
        train: Dataset::from_samples(xt, Some(yt))?,
        test: Dataset::from_samples(xs, Some(ys))?,
    })
}

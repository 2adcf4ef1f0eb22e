//! Image loading and saving, crop sampling, splits and synthetic datasets.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derived_rng, stable_hash};
use crate::tensor::{Shape4, Tensor4};

/// Loads an 8-bit RGB PNG or binary PPM as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor4<f64>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let img = reader
        .decode()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(from_rgb8(&rgb)),
        other => Err(Error::data(format!(
            "{}: unsupported pixel format {:?}; only 8-bit RGB is accepted",
            path.display(),
            other.color()
        ))),
    }
}

pub fn from_rgb8(rgb: &RgbImage) -> Tensor4<f64> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
}

/// Rounds a `(1, 3, h, w)` tensor to 8 bits after clipping to `[0, 1]`.
pub fn to_rgb8(x: &Tensor4<f64>) -> Result<RgbImage> {
    let s = x.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::config(format!("expected a (1, 3, h, w) image, got {s}")));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |xx, yy| {
        image::Rgb(std::array::from_fn(|c| {
            (x.at(0, c, yy as usize, xx as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

/// Writes PNG or binary PPM, chosen by the file extension.
pub fn save_image(path: &Path, x: &Tensor4<f64>) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let format = match ext.as_str() {
        "png" => image::ImageFormat::Png,
        "ppm" | "pnm" => image::ImageFormat::Pnm,
        _ => return Err(Error::data(format!("{}: output must end in .png or .ppm", path.display()))),
    };
    to_rgb8(x)?
        .save_with_format(path, format)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Newline-separated image paths; blank lines and `#` comments are skipped.
/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

/// Deterministic train/validation split: a path goes to validation when its
/// seeded hash falls in the lowest `val_fraction` of the hash range.
pub fn split_paths(paths: &[PathBuf], seed: u64, val_fraction: f64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in paths {
        let h = stable_hash(seed, p.to_string_lossy().as_bytes());
        if (h as f64 / u64::MAX as f64) < val_fraction {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, val)
}

/// Synthetic image families with controllable spatial-frequency content.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    GaussianBlobs,
    Gradients,
    /// Sum of sinusoids with frequencies up to `cutoff` cycles per pixel (at most 0.5).
    BandLimitedNoise { cutoff: f64 },
    Constant,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("gaussian_blobs", None) => Ok(SyntheticKind::GaussianBlobs),
            ("gradients", None) => Ok(SyntheticKind::Gradients),
            ("constant", None) => Ok(SyntheticKind::Constant),
            ("band_limited_noise", a) => {
                let cutoff = match a {
                    None => 0.25,
                    Some(a) => a
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("invalid cutoff {a:?}")))?,
                };
                if !(cutoff > 0.0 && cutoff <= 0.5) {
                    return Err(Error::config("band_limited_noise cutoff must be in (0, 0.5]"));
                }
                Ok(SyntheticKind::BandLimitedNoise { cutoff })
            }
            _ => Err(Error::config(format!(
                "unknown synthetic kind {s:?} (gaussian_blobs, gradients, band_limited_noise[:cutoff], constant)"
            ))),
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyntheticKind::GaussianBlobs => f.write_str("gaussian_blobs"),
            SyntheticKind::Gradients => f.write_str("gradients"),
            SyntheticKind::BandLimitedNoise { cutoff } => write!(f, "band_limited_noise:{cutoff}"),
            SyntheticKind::Constant => f.write_str("constant"),
        }
    }
}

/// `n` reproducible `size x size` images of the given kind.
pub fn make_synthetic(kind: SyntheticKind, n: usize, size: usize, seed: u64) -> Vec<Tensor4<f64>> {
    (0..n).map(|i| synthetic_image(kind, size, seed, i as u64)).collect()
}

fn synthetic_image(kind: SyntheticKind, size: usize, seed: u64, index: u64) -> Tensor4<f64> {
    let mut rng = derived_rng(seed, "synthetic", index, 0);
    let sz = size as f64;
    match kind {
        SyntheticKind::Constant => {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            Tensor4::from_fn([1, 3, size, size], |[_, c, _, _]| color[c])
        }
        SyntheticKind::Gradients => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            Tensor4::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let u = ((x as f64 - sz / 2.0) * dx + (y as f64 - sz / 2.0) * dy) / sz + 0.5;
                let u = u.clamp(0.0, 1.0);
                lo[c] + (hi[c] - lo[c]) * u
            })
        }
        SyntheticKind::GaussianBlobs => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let count = rng.random_range(2..6);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..count)
                .map(|_| {
                    let cx = rng.random_range(0.0..sz);
                    let cy = rng.random_range(0.0..sz);
                    let sigma = rng.random_range(sz / 8.0..sz / 3.0);
                    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
                    (cx, cy, sigma, amp)
                })
                .collect();
            Tensor4::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let mut v = bg[c];
                for (cx, cy, sigma, amp) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                v.clamp(0.0, 1.0)
            })
        }
        SyntheticKind::BandLimitedNoise { cutoff } => {
            let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..24)
                .map(|_| {
                    let f = cutoff * rng.random::<f64>().sqrt();
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    (f * theta.cos(), f * theta.sin(), phase, amp)
                })
                .collect();
            let norm = 0.5 / (waves.len() as f64).sqrt();
            Tensor4::from_fn([1, 3, size, size], |[_, c, y, x]| {
                let mut v = 0.0;
                for (fx, fy, phase, amp) in &waves {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase;
                    v += amp[c] * arg.sin();
                }
                (0.5 + norm * v).clamp(0.0, 1.0)
            })
        }
    }
}

/// In-memory image collection with deterministic crop sampling.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Tensor4<f64>>,
    pub crop: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Dataset {
    /// Images smaller than `crop` in either dimension are dropped with a warning.
    pub fn new(images: Vec<Tensor4<f64>>, crop: usize, batch: usize, seed: u64) -> Result<Self> {
        if crop == 0 || batch == 0 {
            return Err(Error::config("crop size and batch size must be positive"));
        }
        let total = images.len();
        let images: Vec<_> = images
            .into_iter()
            .filter(|im| {
                let s = im.shape();
                let ok = s.h >= crop && s.w >= crop && s.n == 1 && s.c == 3;
                if !ok {
                    log::warn!("skipping {s} image: smaller than the {crop}px crop or not RGB");
                }
                ok
            })
            .collect();
        if images.is_empty() {
            return Err(Error::data(format!("none of the {total} images can supply a {crop}px crop")));
        }
        Ok(Dataset { images, crop, batch, seed })
    }

    pub fn from_paths(paths: &[PathBuf], crop: usize, batch: usize, seed: u64) -> Result<Self> {
        let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        Self::new(images, crop, batch, seed)
    }

    pub fn synthetic(kind: SyntheticKind, n: usize, size: usize, batch: usize, seed: u64) -> Result<Self> {
        Self::new(make_synthetic(kind, n, size, seed), size, batch, seed)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor4<f64>] {
        &self.images
    }

    /// Image index and crop offset of batch slot `index` at `step`.
    pub fn crop_origin(&self, step: u64, index: usize) -> (usize, usize, usize) {
        let mut rng = derived_rng(self.seed, "crop", step, index as u64);
        let i = rng.random_range(0..self.images.len());
        let s = self.images[i].shape();
        let y = rng.random_range(0..=s.h - self.crop);
        let x = rng.random_range(0..=s.w - self.crop);
        (i, y, x)
    }

    /// `(batch, 3, crop, crop)` batch for training step `step`.
    pub fn sample_batch(&self, step: u64) -> Tensor4<f64> {
        let crops: Vec<Tensor4<f64>> = (0..self.batch)
            .map(|b| {
                let (i, y, x) = self.crop_origin(step, b);
                crop(&self.images[i], y, x, self.crop, self.crop)
            })
            .collect();
        Tensor4::stack(&crops).expect("crops share a shape")
    }
}

/// Copy of the `h x w` window at `(y, x)`.
pub fn crop(img: &Tensor4<f64>, y: usize, x: usize, h: usize, w: usize) -> Tensor4<f64> {
    let s = img.shape();
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |[n, c, yy, xx]| img.at(n, c, y + yy, x + xx))
}

//! Reproducible toy segmentation problems.
//!
//! A label map is a background (class 0) with axis-aligned rectangles of the
//! other classes painted on top. Each foreground class keeps to its own
//! horizontal band, so classes sit above or below one another in a
//! consistent order. The image is the class colour plus Gaussian noise,
//! clamped to `[0, 1]`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{Image, LabelMap};
use crate::seeds::derive_indexed;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCRFDS\0\0";
const HEADER_LEN: usize = 8 + 4 * 6 + 8 + 8;
const CHECKSUM_LEN: usize = 32;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate dataset dimensions: {0}")]
    Degenerate(String),
    #[error("checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("not a dataset file")]
    Magic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset declares K = {found}, expected {expected}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("dataset body is malformed: {0}")]
    Malformed(String),
    #[error("PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub noise: f64,
}

impl DatasetParams {
    pub fn new(seed: u64, count: usize, height: usize, width: usize, num_classes: usize, noise: f64) -> Self {
        DatasetParams { seed, count, height, width, num_classes, channels: 3, noise }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Degenerate(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("{}x{} grid", self.height, self.width));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("K = {} (need 2..=256)", self.num_classes));
        }
        if self.channels == 0 {
            return bad("zero channels".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise level {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: u64,
    /// Per-sample generator seed, derived from the dataset seed and `id`.
    pub seed: u64,
    pub image: Image,
    pub labels: LabelMap,
}

/// Class colours: corners of the `[0.2, 0.8]^C` cube while they last,
/// otherwise an evenly spaced lattice in the same range.
pub fn class_palette(num_classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let corners = 1usize.checked_shl(channels as u32).unwrap_or(usize::MAX);
    let levels = if num_classes <= corners {
        2
    } else {
        let mut l: usize = 2;
        while l.pow(channels as u32) < num_classes {
            l += 1;
        }
        l
    };
    (0..num_classes)
        .map(|c| {
            let mut rest = c;
            (0..channels)
                .map(|_| {
                    let digit = rest % levels;
                    rest /= levels;
                    0.2 + 0.6 * digit as f64 / (levels - 1) as f64
                })
                .collect()
        })
        .collect()
}

fn draw_labels(params: &DatasetParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (h, w, k) = (params.height, params.width, params.num_classes);
    let mut labels = vec![0usize; h * w];
    let mut classes: Vec<usize> = (1..k).collect();
    let extra = rng.random_range(0..=2usize);
    for _ in 0..extra {
        classes.push(rng.random_range(1..k));
    }
    // Fisher-Yates so paint order (occlusion) varies.
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let bands = (k - 1) as f64;
    for c in classes {
        let rh = rng.random_range((h / 6).max(1)..=(h / 3).max(1));
        let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
        let centre = ((c as f64 - 0.5) / bands + rng.random_range(-0.08..0.08)) * h as f64;
        let top = (centre - rh as f64 / 2.0).round().clamp(0.0, (h - rh) as f64) as usize;
        let left = rng.random_range(0..=w - rw);
        for y in top..top + rh {
            for x in left..left + rw {
                labels[y * w + x] = c;
            }
        }
    }
    labels
}

fn coverage_ok(labels: &[usize], k: usize) -> bool {
    let need = ((labels.len() as f64) * 0.01).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts.iter().all(|&c| c >= need)
}

/// Sample `id` of the dataset described by `params`; a pure function of
/// `(params, id)`.
pub fn generate_sample(params: &DatasetParams, id: u64) -> Result<SyntheticSample, DataError> {
    params.validate()?;
    let seed = derive_indexed(params.seed, "synthetic_data", id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = draw_labels(params, &mut rng);
    for _ in 1..MAX_ATTEMPTS {
        if coverage_ok(&labels, params.num_classes) {
            break;
        }
        labels = draw_labels(params, &mut rng);
    }
    let palette = class_palette(params.num_classes, params.channels);
    let mut image = Image::zeros(params.height, params.width, params.channels);
    let noise = Normal::new(0.0, params.noise).expect("validated noise level");
    for (p, &l) in labels.iter().enumerate() {
        for (v, &mean) in image.pixel_mut(p).iter_mut().zip(&palette[l]) {
            let n = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = (mean + n).clamp(0.0, 1.0);
        }
    }
    Ok(SyntheticSample {
        id,
        seed,
        image,
        labels: LabelMap::new(params.height, params.width, labels),
    })
}

/// Samples `0..count`, generated in parallel.
pub fn generate_dataset(params: &DatasetParams) -> Result<Vec<SyntheticSample>, DataError> {
    params.validate()?;
    (0..params.count as u64).into_par_iter().map(|id| generate_sample(params, id)).collect()
}

/// Header of a dataset container.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn generate(params: &DatasetParams) -> Result<Self, DataError> {
        Ok(Dataset {
            header: DatasetHeader {
                version: DATASET_FORMAT_VERSION,
                height: params.height,
                width: params.width,
                num_classes: params.num_classes,
                channels: params.channels,
                noise: params.noise,
                seed: params.seed,
            },
            samples: generate_dataset(params)?,
        })
    }

    /// Binary container: magic, little-endian header, samples
    /// (id, seed, f64 pixels, u8 labels), then SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [h.version, h.height as u32, h.width as u32, h.num_classes as u32, h.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&h.noise.to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&s.seed.to_le_bytes());
            for v in &s.image.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend(s.labels.labels.iter().map(|&l| l as u8));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_classes: Option<usize>) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(DataError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DataError::Checksum);
        }
        if &body[..8] != MAGIC {
            return Err(DataError::Magic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != DATASET_FORMAT_VERSION {
            return Err(DataError::Version(version));
        }
        let (height, width, num_classes, channels, count) =
            (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize, u32_at(28) as usize);
        if let Some(k) = expected_classes {
            if k != num_classes {
                return Err(DataError::ClassMismatch { expected: k, found: num_classes });
            }
        }
        let noise = f64::from_le_bytes(body[32..40].try_into().expect("8 bytes"));
        let seed = u64::from_le_bytes(body[40..48].try_into().expect("8 bytes"));
        let n = height * width;
        let sample_len = 16 + 8 * n * channels + n;
        if body.len() != HEADER_LEN + count * sample_len {
            return Err(DataError::Malformed(format!("{} body bytes for {count} samples", body.len())));
        }
        let mut samples = Vec::with_capacity(count);
        for chunk in body[HEADER_LEN..].chunks_exact(sample_len) {
            let id = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes"));
            let sseed = u64::from_le_bytes(chunk[8..16].try_into().expect("8 bytes"));
            let data: Vec<f64> = chunk[16..16 + 8 * n * channels]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let labels: Vec<usize> = chunk[16 + 8 * n * channels..].iter().map(|&b| b as usize).collect();
            if labels.iter().any(|&l| l >= num_classes) {
                return Err(DataError::Malformed(format!("sample {id} has a label >= {num_classes}")));
            }
            samples.push(SyntheticSample {
                id,
                seed: sseed,
                image: Image { height, width, channels, data },
                labels: LabelMap::new(height, width, labels),
            });
        }
        Ok(Dataset {
            header: DatasetHeader { version, height, width, num_classes, channels, noise, seed },
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_classes: Option<usize>) -> Result<Self, DataError> {
        Self::from_bytes(&std::fs::read(path)?, expected_classes)
    }
}

/// Writes a binary (P5) graymap with maxval `K - 1`.
pub fn write_pgm(path: &Path, labels: &LabelMap, num_classes: usize) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(labels.labels.len() + 32);
    write!(out, "P5\n{} {}\n{}\n", labels.width, labels.height, num_classes - 1)?;
    out.extend(labels.labels.iter().map(|&l| l as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 graymap written by [`write_pgm`]; returns the map and maxval.
pub fn read_pgm(path: &Path) -> Result<(LabelMap, usize), DataError> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(DataError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(DataError::Pgm(format!("unsupported magic {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| DataError::Pgm(format!("bad header field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval > 255 {
        return Err(DataError::Pgm("16-bit graymaps are not supported".into()));
    }
    let data = &bytes[i + 1..];
    if data.len() != width * height {
        return Err(DataError::Pgm(format!("{} pixel bytes for {width}x{height}", data.len())));
    }
    Ok((LabelMap::new(height, width, data.iter().map(|&b| b as usize).collect()), maxval))
}

/// Per-pixel nearest-colour classifier: the Bayes rule for equal priors and
/// isotropic unclamped noise.
pub fn nearest_color_labels(image: &Image, palette: &[Vec<f64>]) -> Vec<usize> {
    (0..image.num_pixels())
        .map(|p| {
            let px = image.pixel(p);
            let mut best = (0, f64::INFINITY);
            for (c, col) in palette.iter().enumerate() {
                let d: f64 = px.iter().zip(col).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Pixel accuracy of [`nearest_color_labels`] over a sample set.
pub fn nearest_color_accuracy(samples: &[SyntheticSample], num_classes: usize) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let palette = class_palette(num_classes, s.image.channels);
        let pred = nearest_color_labels(&s.image, &palette);
        hit += pred.iter().zip(&s.labels.labels).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    hit as f64 / total as f64
}

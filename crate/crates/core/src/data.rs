//! Synthetic bone-like samples, intensity preprocessing and PGM files.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("{}: byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One image with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Option<Mask>,
    pub labeled: bool,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Option<Mask>) -> Result<Self, DataError> {
        let id = id.into();
        let invalid = |reason: String| DataError::InvalidSample {
            id: id.clone(),
            reason,
        };
        let &[1, h, w] = image.shape() else {
            return Err(invalid(format!("image shape {:?} is not [1, H, W]", image.shape())));
        };
        if let Some(m) = &mask {
            if (m.height(), m.width()) != (h, w) {
                return Err(invalid(format!(
                    "mask is {}×{} but image is {h}×{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            id,
            image,
            mask,
            labeled: false,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The same sample with its mask withheld.
    pub fn without_mask(&self) -> Self {
        Self {
            mask: None,
            labeled: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `(H, W)`.
    pub resolution: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range of capsules per image.
    pub shapes_per_image: (usize, usize),
    pub noise_sigma: f64,
    pub background_level: f64,
    pub foreground_level: f64,
    /// Per-capsule brightness is drawn from `foreground_level ± jitter`.
    pub foreground_jitter: f64,
    /// Peak-to-peak strength of the linear illumination ramp.
    pub illumination: f64,
    /// Capsule length range as a fraction of the shorter image side.
    pub length_range: (f64, f64),
    /// Capsule thickness range as a fraction of the shorter image side.
    pub width_range: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
            n_train: 139,
            n_val: 20,
            n_test: 50,
            shapes_per_image: (3, 8),
            noise_sigma: 0.08,
            background_level: 0.35,
            foreground_level: 0.55,
            foreground_jitter: 0.12,
            illumination: 0.3,
            length_range: (0.25, 0.6),
            width_range: (0.03, 0.1),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        let (h, w) = self.resolution;
        if h < 4 || w < 4 {
            return bad("resolution must be at least 4×4");
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad("shapes_per_image must be a non-empty range starting at 1 or more");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !unit(self.background_level) || !unit(self.foreground_level) {
            return bad("intensity levels must lie in [0, 1]");
        }
        if !(self.foreground_jitter >= 0.0 && self.illumination >= 0.0) {
            return bad("jitter and illumination must be non-negative");
        }
        for (name, (a, b)) in [("length_range", self.length_range), ("width_range", self.width_range)] {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(DataError::InvalidConfig(format!("{name} must satisfy 0 < min ≤ max")));
            }
        }
        if self.total() == 0 {
            return bad("dataset has no samples");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Train, validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    level: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (ex, ey) = (p.0 - self.a.0 - t * dx, p.1 - self.a.1 - t * dy);
        ex * ex + ey * ey <= self.radius * self.radius
    }
}

/// Renders one image of bright capsules on a noisy, unevenly lit background.
///
/// The mask is the exact union of the capsules. Image values are clamped to
/// `[0, 1]` but otherwise unprocessed.
pub fn synth_sample<R: Rng + ?Sized>(rng: &mut R, config: &DatasetConfig, id: &str) -> Sample {
    let (h, w) = config.resolution;
    let side = h.min(w) as f64;
    let n = rng.random_range(config.shapes_per_image.0..=config.shapes_per_image.1);
    let capsules: Vec<Capsule> = (0..n)
        .map(|_| {
            let center = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let length = side * rng.random_range(config.length_range.0..=config.length_range.1);
            let width = side * rng.random_range(config.width_range.0..=config.width_range.1);
            let (hx, hy) = (0.5 * length * angle.cos(), 0.5 * length * angle.sin());
            let jitter = config.foreground_jitter;
            let level = config.foreground_level
                + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            Capsule {
                a: (center.0 - hx, center.1 - hy),
                b: (center.0 + hx, center.1 + hy),
                radius: width / 2.0,
                level,
            }
        })
        .collect();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");

    let mut image = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = capsules
                .iter()
                .filter(|c| c.contains(p))
                .map(|c| c.level)
                .reduce(f64::max);
            let mut v = hit.unwrap_or(config.background_level);
            if config.illumination > 0.0 {
                let (u, t) = (p.0 / w as f64 - 0.5, p.1 / h as f64 - 0.5);
                v += config.illumination * (gx * u + gy * t);
            }
            if config.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            image.push(v.clamp(0.0, 1.0) as f32);
            mask.push(u8::from(hit.is_some()));
        }
    }
    Sample {
        id: id.to_owned(),
        image: Tensor::new(vec![1, h, w], image).expect("sized buffer"),
        mask: Some(Mask::new(h, w, mask).expect("binary mask")),
        labeled: false,
    }
}

/// Result of [`normalize_intensity`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub image: Tensor<f32>,
    /// Set when the input was constant and the output is all zeros.
    pub constant_input: bool,
}

/// Min–max rescaling to `[0, 1]`.
pub fn normalize_intensity(image: &Tensor<f32>) -> Normalized {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Normalized {
            image: Tensor::zeros(image.shape()),
            constant_input: true,
        };
    }
    let span = hi - lo;
    let data = image.data().iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Normalized {
        image: Tensor::new(image.shape().to_vec(), data).expect("same shape"),
        constant_input: false,
    }
}

/// Rounds every value to the nearest multiple of 1/255, the grid a PGM file
/// can represent exactly.
pub fn quantize(image: &Tensor<f32>) -> Tensor<f32> {
    let data = image.data().iter().map(|&v| level_value(to_level(v))).collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn level_value(q: u8) -> f32 {
    q as f32 / 255.0
}

/// The preprocessing applied to every stored sample: normalization then
/// 8-bit quantization.
pub fn preprocess(sample: Sample) -> Sample {
    let normalized = normalize_intensity(&sample.image);
    if normalized.constant_input {
        log::warn!("sample {} has a constant image; normalized to zeros", sample.id);
    }
    Sample {
        image: quantize(&normalized.image),
        ..sample
    }
}

/// Generates the full dataset and splits it by a seeded shuffle.
///
/// Sample `i` is rendered from its own ChaCha stream, so changing split
/// sizes never alters the pixels of earlier samples.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let total = config.total();
    let mut rendered: Vec<Sample> = (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            preprocess(synth_sample(&mut rng, config, ""))
        })
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut take = |prefix: &str, range: std::ops::Range<usize>| -> Vec<Sample> {
        order[range]
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut s = std::mem::replace(
                    &mut rendered[i],
                    Sample {
                        id: String::new(),
                        image: Tensor::zeros(&[0]),
                        mask: None,
                        labeled: false,
                    },
                );
                s.id = format!("{prefix}_{j:04}");
                s
            })
            .collect()
    };
    let (a, b) = (config.n_train, config.n_train + config.n_val);
    Ok(Dataset {
        train: take("train", 0..a),
        val: take("val", a..b),
        test: take("test", b..total),
    })
}

#[derive(Debug)]
struct Pgm {
    width: usize,
    height: usize,
    maxval: u16,
    pixels: Vec<u8>,
}

/// Skips whitespace and comments, then reads one decimal header field.
/// Returns the value and its byte offset.
fn header_field(bytes: &[u8], pos: &mut usize, name: &str, path: &Path) -> Result<(usize, usize), DataError> {
    let fail = |offset: usize, reason: String| DataError::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let start_ws = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    if *pos == start_ws {
        return Err(fail(*pos, format!("expected whitespace before {name}")));
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(fail(start, format!("expected {name}")));
    }
    let value = std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| fail(start, format!("{name} out of range")))?;
    Ok((value, start))
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm, DataError> {
    let fail = |offset: usize, reason: String| DataError::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic".into()));
    }
    let mut pos = 2;
    let (width, _) = header_field(bytes, &mut pos, "width", path)?;
    let (height, _) = header_field(bytes, &mut pos, "height", path)?;
    let (maxval, maxval_at) = header_field(bytes, &mut pos, "maxval", path)?;
    if !(1..=255).contains(&maxval) {
        return Err(fail(maxval_at, format!("maxval {maxval} is not an 8-bit depth")));
    }
    if width == 0 || height == 0 {
        return Err(fail(maxval_at, "image has a zero dimension".into()));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected a single whitespace before pixel data".into()));
    }
    pos += 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| fail(pos, "dimensions overflow".into()))?;
    let available = bytes.len() - pos;
    if available < len {
        return Err(fail(bytes.len(), format!("pixel data truncated: {available} of {len} bytes")));
    }
    if available > len {
        return Err(fail(pos + len, format!("{} trailing bytes", available - len)));
    }
    let pixels = bytes[pos..].to_vec();
    if let Some(i) = pixels.iter().position(|&p| p as usize > maxval) {
        return Err(fail(pos + i, format!("pixel {} exceeds maxval {maxval}", pixels[i])));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

fn read_pgm(path: &Path) -> Result<Pgm, DataError> {
    parse_pgm(&std::fs::read(path).map_err(io_err(path))?, path)
}

fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an image and its mask. The sample id is the image file stem.
///
/// Image values are scaled by the file's maxval; masks must use exactly
/// {0, 255}.
pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<Sample, DataError> {
    let img = read_pgm(image_path)?;
    let m = read_pgm(mask_path)?;
    let mask_fail = |offset: usize, reason: String| DataError::Format {
        path: mask_path.to_path_buf(),
        offset,
        reason,
    };
    if (m.width, m.height) != (img.width, img.height) {
        return Err(mask_fail(
            0,
            format!(
                "mask is {}×{} but image is {}×{}",
                m.width, m.height, img.width, img.height
            ),
        ));
    }
    if m.maxval != 255 {
        return Err(mask_fail(0, format!("mask maxval must be 255, found {}", m.maxval)));
    }
    let header = std::fs::metadata(mask_path).map_err(io_err(mask_path))?.len() as usize - m.pixels.len();
    if let Some(i) = m.pixels.iter().position(|&p| p != 0 && p != 255) {
        return Err(mask_fail(header + i, format!("mask value {} is neither 0 nor 255", m.pixels[i])));
    }
    let mask = Mask::from_fn(m.height, m.width, |i| m.pixels[i] == 255);
    let image = if img.maxval == 255 {
        img.pixels.iter().map(|&p| level_value(p)).collect()
    } else {
        img.pixels.iter().map(|&p| p as f32 / img.maxval as f32).collect()
    };
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_owned();
    Sample::new(id, Tensor::new(vec![1, img.height, img.width], image).expect("sized"), Some(mask))
}

/// Paths `<dir>/<id>.pgm` and `<dir>/<id>_mask.pgm`.
pub fn pair_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.pgm")), dir.join(format!("{id}_mask.pgm")))
}

/// Writes a sample as an image/mask pair and returns both paths.
///
/// Values are stored at 8 bits, so the round trip is exact for images on
/// the 1/255 grid (see [`quantize`]).
pub fn save_pair(sample: &Sample, dir: &Path) -> Result<(PathBuf, PathBuf), DataError> {
    let mask = sample.mask.as_ref().ok_or_else(|| DataError::InvalidSample {
        id: sample.id.clone(),
        reason: "no mask to save".into(),
    })?;
    let (h, w) = (sample.height(), sample.width());
    let pixels: Vec<u8> = sample.image.data().iter().map(|&v| to_level(v)).collect();
    let mask_pixels: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let (ip, mp) = pair_paths(dir, &sample.id);
    write_file(&ip, &encode_pgm(w, h, &pixels))?;
    write_file(&mp, &encode_pgm(w, h, &mask_pixels))?;
    Ok((ip, mp))
}

/// Lists generated sample ids of one split, from a `generate` manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub splits: Vec<(String, Vec<String>)>,
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        for (split, ids) in &self.splits {
            writeln!(f, "split {split} {}", ids.len())?;
            for id in ids {
                writeln!(f, "{id}")?;
            }
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let mut offset = 0;
        let mut seed = None;
        let mut splits: Vec<(String, Vec<String>)> = Vec::new();
        let mut remaining = 0usize;
        for line in text.split_inclusive('\n') {
            let fail = |reason: String| DataError::Format {
                path: path.to_path_buf(),
                offset,
                reason,
            };
            let body = line.trim_end();
            if remaining > 0 {
                splits.last_mut().expect("open split").1.push(body.to_owned());
                remaining -= 1;
            } else if let Some(v) = body.strip_prefix("seed ") {
                seed = Some(v.parse().map_err(|_| fail(format!("bad seed {v:?}")))?);
            } else if let Some(v) = body.strip_prefix("split ") {
                let (name, n) = v.split_once(' ').ok_or_else(|| fail("split line needs a count".into()))?;
                remaining = n.parse().map_err(|_| fail(format!("bad count {n:?}")))?;
                splits.push((name.to_owned(), Vec::with_capacity(remaining)));
            } else if !body.is_empty() {
                return Err(fail(format!("unexpected line {body:?}")));
            }
            offset += line.len();
        }
        let fail = |reason: &str| DataError::Format {
            path: path.to_path_buf(),
            offset,
            reason: reason.to_owned(),
        };
        if remaining > 0 {
            return Err(fail("manifest ends inside a split"));
        }
        Ok(Self {
            seed: seed.ok_or_else(|| fail("manifest has no seed line"))?,
            splits,
        })
    }
}

/// Writes every split under `dir` and the manifest last, so an interrupted
/// write never leaves a manifest behind.
pub fn save_dataset(dataset: &Dataset, seed: u64, dir: &Path) -> Result<Manifest, DataError> {
    let mut manifest = Manifest {
        seed,
        splits: Vec::new(),
    };
    for (name, samples) in dataset.splits() {
        let split_dir = dir.join(name);
        std::fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
        for s in samples {
            save_pair(s, &split_dir)?;
        }
        manifest
            .splits
            .push((name.to_owned(), samples.iter().map(|s| s.id.clone()).collect()));
    }
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, manifest.to_string().as_bytes())?;
    Ok(manifest)
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset), DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest = Manifest::parse(&text, &path)?;
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, ids) in &manifest.splits {
        let target = match split.as_str() {
            "train" => &mut dataset.train,
            "val" => &mut dataset.val,
            "test" => &mut dataset.test,
            other => {
                return Err(DataError::Format {
                    path: path.clone(),
                    offset: 0,
                    reason: format!("unknown split {other:?}"),
                })
            }
        };
        for id in ids {
            let (ip, mp) = pair_paths(&dir.join(split), id);
            target.push(load_pair(&ip, &mp)?);
        }
    }
    Ok((manifest, dataset))
}

//! Synthetic landmark images, semi-supervised splits and the HVDS file format.
//!
//! Each record is a `W × W` image made of one Gaussian bump per landmark,
//! labeled with the landmark coordinates normalized to `[0, 1]²`
//! (`h = (x_0, y_0, x_1, y_1, …)`). Landmarks 0 and 1 form the "eye pair"
//! used for interocular normalization.
//!
//! HVDS layout (all little-endian):
//!
//! ```text
//! "HVDS" | u32 version | u32 W | u32 K | u32 flags (bit0 = masked) | u64 n | u64 m | u64 t
//! f64 labeled images (n·W²) | f64 labeled labels (n·2K)
//! f64 unlabeled images (m·W²)
//! f64 test images (t·W²) | f64 test labels (t·2K)
//! masks, when bit0 is set: ⌈W²/8⌉ bytes per image (LSB first), labeled, unlabeled, test
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{mask_tensor, sanitize};
use crate::error::{Error, Result};
use crate::noise::hash_key;
use crate::objectives::{LabeledBatch, UnlabeledBatch};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"HVDS";
pub const DATASET_VERSION: u32 = 1;
const FLAG_MASKED: u32 = 1;

const MAX_RETRIES: usize = 100;

/// Generator settings for the synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_side: usize,
    pub num_landmarks: usize,
    /// Bump standard deviation, in pixels.
    pub blob_std: f64,
    /// Additive pixel noise standard deviation.
    pub noise_std: f64,
    /// Per-landmark positional jitter, in normalized units.
    pub jitter_std: f64,
    pub depth_mode: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_side: 16,
            num_landmarks: 4,
            blob_std: 1.0,
            noise_std: 0.05,
            jitter_std: 0.02,
            depth_mode: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn d_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn h_dim(&self) -> usize {
        2 * self.num_landmarks
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 {
            return Err(Error::Invalid("image_side must be positive".into()));
        }
        if self.num_landmarks < 2 {
            return Err(Error::Invalid(format!("need at least 2 landmarks, got {}", self.num_landmarks)));
        }
        if !(self.blob_std > 0.0) || !(self.noise_std >= 0.0) || !(self.jitter_std >= 0.0) {
            return Err(Error::Invalid("blob_std must be positive, noise/jitter non-negative".into()));
        }
        Ok(())
    }
}

/// An image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Vec<f64>,
    pub label: Vec<f64>,
    /// Observation flags (masked data only).
    pub observed: Option<Vec<bool>>,
}

/// An image without a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub image: Vec<f64>,
    pub observed: Option<Vec<bool>>,
}

impl LabeledImage {
    pub fn without_label(&self) -> Image {
        Image { image: self.image.clone(), observed: self.observed.clone() }
    }
}

/// Shape facts recorded in an HVDS header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub image_side: usize,
    pub num_landmarks: usize,
    pub masked: bool,
}

impl DatasetMeta {
    pub fn d_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn h_dim(&self) -> usize {
        2 * self.num_landmarks
    }
}

impl From<&SceneConfig> for DatasetMeta {
    fn from(c: &SceneConfig) -> Self {
        DatasetMeta { image_side: c.image_side, num_landmarks: c.num_landmarks, masked: c.depth_mode }
    }
}

/// Labeled pairs, unlabeled images and a held-out labeled test set.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiDataset {
    pub meta: DatasetMeta,
    pub labeled: Vec<LabeledImage>,
    pub unlabeled: Vec<Image>,
    pub test: Vec<LabeledImage>,
}

fn template(k: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.32, 0.38), (0.68, 0.38), (0.5, 0.56), (0.5, 0.76)];
    pts.truncate(k);
    let extra = k.saturating_sub(4);
    for i in 0..extra {
        let a = std::f64::consts::PI * (0.9 + 1.2 * (i as f64 + 0.5) / extra as f64);
        pts.push((0.5 + 0.36 * a.cos(), 0.5 + 0.36 * a.sin()));
    }
    pts
}

/// Places `count` landmarks, rejecting configurations that leave the frame.
fn place_landmarks(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let margin = cfg.blob_std.max(1.0) / cfg.image_side as f64;
    let base = template(cfg.num_landmarks);
    let rot = Normal::new(0.0, 0.2).expect("valid std");
    let shift = Normal::new(0.0, 0.06).expect("valid std");
    let jitter = Normal::new(0.0, cfg.jitter_std).map_err(|e| Error::Invalid(e.to_string()))?;
    for _ in 0..MAX_RETRIES {
        let theta: f64 = rot.sample(rng);
        let scale = rng.random_range(0.85..1.1);
        let (tx, ty) = (shift.sample(rng), shift.sample(rng));
        let (s, c) = theta.sin_cos();
        let pts: Vec<(f64, f64)> = base
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - 0.5, y - 0.5);
                let px = 0.5 + scale * (c * dx - s * dy) + tx + jitter.sample(rng);
                let py = 0.5 + scale * (s * dx + c * dy) + ty + jitter.sample(rng);
                (px, py)
            })
            .collect();
        if pts.iter().all(|&(x, y)| (margin..=1.0 - margin).contains(&x) && (margin..=1.0 - margin).contains(&y)) {
            return Ok(pts);
        }
    }
    Err(Error::Invalid(format!("landmarks left the frame in {MAX_RETRIES} consecutive draws")))
}

/// Noiseless rendering of landmark bumps (normalized coordinates).
pub fn render(side: usize, blob_std: f64, landmarks: &[(f64, f64)]) -> Vec<f64> {
    let w = side as f64;
    let inv = 1.0 / (2.0 * blob_std * blob_std);
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            img[r * side + c] = landmarks
                .iter()
                .map(|&(x, y)| {
                    let (dx, dy) = (px - x * w, py - y * w);
                    (-(dx * dx + dy * dy) * inv).exp()
                })
                .sum();
        }
    }
    img
}

/// Depth-style invalid pixels: one occluding rectangle (70% of records),
/// saturation near bump peaks, and 5% random dropout.
fn observation_mask(side: usize, clean: &[f64], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut observed = vec![true; side * side];
    if rng.random_bool(0.7) {
        let s = side as f64;
        let rw = ((s * rng.random_range(0.15..0.4)).round() as usize).max(1);
        let rh = ((s * rng.random_range(0.15..0.4)).round() as usize).max(1);
        let r0 = rng.random_range(0..=side - rh.min(side));
        let c0 = rng.random_range(0..=side - rw.min(side));
        for r in r0..(r0 + rh).min(side) {
            for c in c0..(c0 + rw).min(side) {
                observed[r * side + c] = false;
            }
        }
    }
    for (o, &v) in observed.iter_mut().zip(clean) {
        if v > 0.9 || rng.random_bool(0.05) {
            *o = false;
        }
    }
    observed
}

/// One record, deterministic in `(cfg.seed, index)`.
pub fn generate_record(cfg: &SceneConfig, index: u64) -> Result<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[cfg.seed, 0x5CE4E, index]));
    let pts = place_landmarks(cfg, &mut rng)?;
    let clean = render(cfg.image_side, cfg.blob_std, &pts);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut image: Vec<f64> = clean.iter().map(|&v| v + noise.sample(&mut rng)).collect();
    let observed = cfg.depth_mode.then(|| observation_mask(cfg.image_side, &clean, &mut rng));
    if let Some(o) = &observed {
        image = sanitize(&image, o);
    }
    let label = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
    Ok(LabeledImage { image, label, observed })
}

/// `count` records; record `i` depends only on the seed and `i`.
pub fn generate(cfg: &SceneConfig, count: usize) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| generate_record(cfg, i)).collect()
}

const TEST_BASE: u64 = 1 << 40;
const UNLABELED_BASE: u64 = 2 << 40;

impl SemiDataset {
    /// Generates `n` labeled, `m` unlabeled and `t` test records from
    /// disjoint index ranges, so datasets that differ only in `n` or `m`
    /// share their test set and their common prefixes.
    pub fn synthesize(cfg: &SceneConfig, n: usize, m: usize, t: usize) -> Result<Self> {
        cfg.validate()?;
        if t == 0 {
            return Err(Error::Invalid("the test set needs at least one record".into()));
        }
        let range = |base: u64, count: usize| -> Result<Vec<LabeledImage>> {
            (0..count as u64).map(|i| generate_record(cfg, base + i)).collect()
        };
        Ok(SemiDataset {
            meta: DatasetMeta::from(cfg),
            labeled: range(0, n)?,
            unlabeled: range(UNLABELED_BASE, m)?.iter().map(LabeledImage::without_label).collect(),
            test: range(TEST_BASE, t)?,
        })
    }
}

/// Source-record indices of each part of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(len: usize, n: usize, m: usize, t: usize, seed: u64) -> Result<SplitIndices> {
    if t == 0 {
        return Err(Error::Invalid("the test set needs at least one record".into()));
    }
    let needed = n + m + t;
    if needed > len {
        return Err(Error::Invalid(format!("split needs {needed} records (n={n}, m={m}, t={t}) but only {len} are available")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(hash_key(&[seed, 0x5B117])));
    Ok(SplitIndices {
        labeled: order[..n].to_vec(),
        unlabeled: order[n..n + m].to_vec(),
        test: order[n + m..needed].to_vec(),
    })
}

/// Shuffles `records` and cuts them into `n` labeled, `m` unlabeled and `t` test records.
pub fn split(records: &[LabeledImage], meta: DatasetMeta, n: usize, m: usize, t: usize, seed: u64) -> Result<SemiDataset> {
    let idx = split_indices(records.len(), n, m, t, seed)?;
    Ok(SemiDataset {
        meta,
        labeled: idx.labeled.iter().map(|&i| records[i].clone()).collect(),
        unlabeled: idx.unlabeled.iter().map(|&i| records[i].without_label()).collect(),
        test: idx.test.iter().map(|&i| records[i].clone()).collect(),
    })
}

/// Batch of labeled records with unobserved pixels zeroed.
pub fn labeled_batch(records: &[&LabeledImage]) -> Result<LabeledBatch> {
    let first = records.first().ok_or(Error::Empty("labeled batch"))?;
    let (dw, hw) = (first.image.len(), first.label.len());
    let images: Vec<Vec<f64>> = records
        .iter()
        .map(|r| match &r.observed {
            Some(o) => sanitize(&r.image, o),
            None => r.image.clone(),
        })
        .collect();
    let labels: Vec<&[f64]> = records.iter().map(|r| r.label.as_slice()).collect();
    let observed = masks_tensor(records.iter().map(|r| r.observed.as_deref()), records.len(), dw)?;
    LabeledBatch::new(Tensor::from_rows(&images, dw)?, Tensor::from_rows(&labels, hw)?, observed)
}

/// Batch of unlabeled images with unobserved pixels zeroed.
pub fn unlabeled_batch(records: &[&Image]) -> Result<UnlabeledBatch> {
    let first = records.first().ok_or(Error::Empty("unlabeled batch"))?;
    let dw = first.image.len();
    let images: Vec<Vec<f64>> = records
        .iter()
        .map(|r| match &r.observed {
            Some(o) => sanitize(&r.image, o),
            None => r.image.clone(),
        })
        .collect();
    let observed = masks_tensor(records.iter().map(|r| r.observed.as_deref()), records.len(), dw)?;
    UnlabeledBatch::new(Tensor::from_rows(&images, dw)?, observed)
}

fn masks_tensor<'a>(masks: impl Iterator<Item = Option<&'a [bool]>>, rows: usize, width: usize) -> Result<Option<Tensor>> {
    let masks: Vec<Option<&[bool]>> = masks.collect();
    if masks.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut flat = Vec::with_capacity(rows * width);
    for m in masks {
        match m {
            Some(m) if m.len() == width => flat.extend_from_slice(m),
            Some(m) => return Err(Error::shape("mask", format!("{} flags for {width} pixels", m.len()))),
            None => flat.extend(std::iter::repeat_n(true, width)),
        }
    }
    Ok(Some(mask_tensor(&[rows, width], &flat)?))
}

// ---------------------------------------------------------------------------
// HVDS I/O

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { what: what.to_string(), needed: n - available });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        let found = [got[0], got[1], got[2], got[3]];
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count.checked_mul(8).ok_or_else(|| Error::Malformed(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &o) in mask.iter().enumerate() {
        if o {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_mask(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

impl SemiDataset {
    pub fn d_dim(&self) -> usize {
        self.meta.d_dim()
    }

    pub fn h_dim(&self) -> usize {
        self.meta.h_dim()
    }

    fn check_shapes(&self) -> Result<()> {
        let (dw, hw) = (self.d_dim(), self.h_dim());
        let mask_ok = |o: &Option<Vec<bool>>| match o {
            Some(m) => self.meta.masked && m.len() == dw,
            None => !self.meta.masked,
        };
        let pairs_ok = |v: &[LabeledImage]| {
            v.iter().all(|r| r.image.len() == dw && r.label.len() == hw && mask_ok(&r.observed))
        };
        let images_ok = self.unlabeled.iter().all(|r| r.image.len() == dw && mask_ok(&r.observed));
        if !(pairs_ok(&self.labeled) && pairs_ok(&self.test) && images_ok) {
            return Err(Error::Invalid("records disagree with the dataset header".into()));
        }
        Ok(())
    }

    /// Serializes to HVDS bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let mut out = Vec::new();
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.image_side as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.num_landmarks as u32).to_le_bytes());
        out.extend_from_slice(&(if self.meta.masked { FLAG_MASKED } else { 0 }).to_le_bytes());
        for count in [self.labeled.len(), self.unlabeled.len(), self.test.len()] {
            out.extend_from_slice(&(count as u64).to_le_bytes());
        }
        self.labeled.iter().for_each(|r| put_f64s(&mut out, &r.image));
        self.labeled.iter().for_each(|r| put_f64s(&mut out, &r.label));
        self.unlabeled.iter().for_each(|r| put_f64s(&mut out, &r.image));
        self.test.iter().for_each(|r| put_f64s(&mut out, &r.image));
        self.test.iter().for_each(|r| put_f64s(&mut out, &r.label));
        if self.meta.masked {
            let masks = self
                .labeled
                .iter()
                .map(|r| &r.observed)
                .chain(self.unlabeled.iter().map(|r| &r.observed))
                .chain(self.test.iter().map(|r| &r.observed));
            for m in masks {
                out.extend_from_slice(&pack_mask(m.as_ref().expect("checked")));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, supported: DATASET_VERSION });
        }
        let side = r.u32("image side")? as usize;
        let k = r.u32("landmark count")? as usize;
        let flags = r.u32("flags")?;
        if flags & !FLAG_MASKED != 0 {
            return Err(Error::Malformed(format!("unknown flag bits {flags:#x}")));
        }
        let meta = DatasetMeta { image_side: side, num_landmarks: k, masked: flags & FLAG_MASKED != 0 };
        let n = r.u64("labeled count")? as usize;
        let m = r.u64("unlabeled count")? as usize;
        let t = r.u64("test count")? as usize;
        let (dw, hw) = (meta.d_dim(), meta.h_dim());
        let read_rows = |r: &mut Reader, rows: usize, width: usize, what: &str| -> Result<Vec<Vec<f64>>> {
            let flat = r.f64s(rows.saturating_mul(width), what)?;
            Ok(if width == 0 { vec![Vec::new(); rows] } else { flat.chunks(width).map(<[f64]>::to_vec).collect() })
        };
        let li = read_rows(&mut r, n, dw, "labeled images")?;
        let ll = read_rows(&mut r, n, hw, "labeled labels")?;
        let ui = read_rows(&mut r, m, dw, "unlabeled images")?;
        let ti = read_rows(&mut r, t, dw, "test images")?;
        let tl = read_rows(&mut r, t, hw, "test labels")?;
        let mut masks = Vec::new();
        if meta.masked {
            let per = dw.div_ceil(8);
            for i in 0..n + m + t {
                masks.push(Some(unpack_mask(r.take(per, &format!("mask {i}"))?, dw)));
            }
        } else {
            masks.resize(n + m + t, None);
        }
        r.finish()?;
        let mut masks = masks.into_iter();
        let pairs = |images: Vec<Vec<f64>>, labels: Vec<Vec<f64>>, masks: &mut dyn Iterator<Item = Option<Vec<bool>>>| {
            images
                .into_iter()
                .zip(labels)
                .map(|(image, label)| LabeledImage { image, label, observed: masks.next().unwrap() })
                .collect::<Vec<_>>()
        };
        let labeled = pairs(li, ll, &mut masks);
        let unlabeled = ui.into_iter().map(|image| Image { image, observed: masks.next().unwrap() }).collect();
        let test = pairs(ti, tl, &mut masks);
        Ok(SemiDataset { meta, labeled, unlabeled, test })
    }
}

pub fn save_dataset(ds: &SemiDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Reads an HVDS file; this is also the entry point for externally produced data.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<SemiDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SemiDataset::from_bytes(&bytes)
}

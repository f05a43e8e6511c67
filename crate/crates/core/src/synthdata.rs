//! Procedural two-domain segmentation scenes.
//!
//! A scene is a stack of horizontal class bands with rectangles of a
//! designated object class stamped on top. Class `k` renders at intensity
//! `(k + 0.5) / C` plus Gaussian noise. Target scenes are rendered the same
//! way and then shifted: a vertical translation applied to labels and image
//! alike, followed by a gain/bias/noise transform on the image only.
//!
//! Every scene draws from its own [`SplitMix64`] stream keyed by
//! `(seed, split, scene index, purpose)`, so scenes are independent of
//! generation order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::pten::{Pten, PtenData};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const IGNORE_LABEL: u8 = 255;
pub const MAX_SCENES: usize = 100_000;
pub const MANIFEST_VERSION: u32 = 1;

/// Per-pixel class ids, row-major. `255` marks ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!("label map {height}x{width} with {} values", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, values: vec![class; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Every non-ignore value is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes) {
            Some(v) => Err(Error::invalid(format!("label {v} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Copy of the `h×w` window at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape("crop outside label map"));
        }
        let mut values = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMap::new(h, w, values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub vertical_offset_px: i64,
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    pub noise_sigma: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self { vertical_offset_px: 0, intensity_gain: 1.0, intensity_bias: 0.0, noise_sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Vertical proportion of each class band, top to bottom.
    pub band_fractions: Vec<f64>,
    /// Each band boundary moves by a uniform integer in `[-j, j]` rows per scene.
    pub band_jitter_px: usize,
    /// Class stamped by the rectangles; defaults to the last class.
    pub object_class: Option<usize>,
    pub object_count_range: [usize; 2],
    pub object_size_range: [usize; 2],
    /// Pixel noise present in both domains.
    pub base_noise_sigma: f64,
    pub source_seed: u64,
    pub target_seed: u64,
    pub shift: DomainShift,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            band_fractions: vec![0.25; 4],
            band_jitter_px: 0,
            object_class: None,
            object_count_range: [0, 3],
            object_size_range: [4, 12],
            base_noise_sigma: 0.05,
            source_seed: 1,
            target_seed: 2,
            shift: DomainShift { vertical_offset_px: 6, intensity_gain: 0.8, intensity_bias: 0.1, noise_sigma: 0.05 },
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("scene.height", "image must be at least 2x2"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config("scene.num_classes", "must be in [2, 255]"));
        }
        if self.band_fractions.len() != self.num_classes {
            return Err(Error::config("scene.band_fractions", "needs one entry per class"));
        }
        if self.band_fractions.iter().any(|&f| !f.is_finite() || f < 0.0) {
            return Err(Error::config("scene.band_fractions", "entries must be finite and >= 0"));
        }
        let total: f64 = self.band_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("scene.band_fractions", format!("must sum to 1, got {total}")));
        }
        if self.object_class() >= self.num_classes {
            return Err(Error::config("scene.object_class", "must be a valid class id"));
        }
        let [lo, hi] = self.object_count_range;
        if lo > hi {
            return Err(Error::config("scene.object_count_range", "min exceeds max"));
        }
        let [lo, hi] = self.object_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("scene.object_size_range", "need 1 <= min <= max"));
        }
        for (key, v) in
            [("scene.base_noise_sigma", self.base_noise_sigma), ("scene.shift.noise_sigma", self.shift.noise_sigma)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if !self.shift.intensity_gain.is_finite() || !self.shift.intensity_bias.is_finite() {
            return Err(Error::config("scene.shift", "gain and bias must be finite"));
        }
        if self.shift.vertical_offset_px.unsigned_abs() as usize >= self.height {
            return Err(Error::config("scene.shift.vertical_offset_px", "must be smaller than the image height"));
        }
        Ok(())
    }

    pub fn object_class(&self) -> usize {
        self.object_class.unwrap_or(self.num_classes - 1)
    }

    pub fn class_intensity(&self, class: usize) -> f64 {
        (class as f64 + 0.5) / self.num_classes as f64
    }

    /// Row boundaries of the unjittered bands: band `k` covers `[b[k], b[k+1])`.
    pub fn band_boundaries(&self) -> Vec<usize> {
        let mut cum = 0.0;
        let mut out = vec![0];
        for &f in &self.band_fractions {
            cum += f;
            out.push(((cum * self.height as f64).round() as usize).min(self.height));
        }
        *out.last_mut().unwrap() = self.height;
        out
    }

    fn top_band_class(&self) -> u8 {
        self.band_fractions.iter().position(|&f| f > 0.0).unwrap_or(0) as u8
    }

    fn bottom_band_class(&self) -> u8 {
        self.band_fractions.iter().rposition(|&f| f > 0.0).unwrap_or(0) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images are `1×H×W` tensors. Labels are absent for the unlabeled target split.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub split: Split,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub shift: Option<DomainShift>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Option<Vec<LabelMap>>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            if img.shape() != [1, self.height, self.width] {
                return Err(Error::shape(format!(
                    "image shape {:?}, expected [1, {}, {}]",
                    img.shape(),
                    self.height,
                    self.width
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::invalid(format!("{} images but {} label maps", self.images.len(), labels.len())));
            }
            for l in labels {
                if l.height != self.height || l.width != self.width {
                    return Err(Error::shape("label map size differs from image size"));
                }
                l.validate(self.num_classes)?;
            }
        }
        Ok(())
    }
}

/// Source train, target train (labels withheld), target test, and the withheld
/// target-train labels for use by tests and oracles only.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
    pub target_train_labels: Vec<LabelMap>,
}

const SPLIT_SOURCE_TRAIN: u64 = 0;
const SPLIT_TARGET_TRAIN: u64 = 1;
const SPLIT_TARGET_TEST: u64 = 2;

const PURPOSE_LAYOUT: u64 = 0;
const PURPOSE_NOISE: u64 = 1;
const PURPOSE_FILL: u64 = 2;
const PURPOSE_SHIFT: u64 = 3;

/// Unshifted scene: labels plus the image in `f64`.
fn render_scene(cfg: &SceneConfig, seed: u64, split: u64, index: u64) -> (LabelMap, Vec<f64>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut layout = SplitMix64::stream(seed, &[split, index, PURPOSE_LAYOUT]);

    let mut bounds = cfg.band_boundaries();
    if cfg.band_jitter_px > 0 {
        let j = cfg.band_jitter_px as i64;
        for b in bounds.iter_mut().take(cfg.num_classes).skip(1) {
            let delta = layout.below(2 * j as u64 + 1) as i64 - j;
            *b = (*b as i64 + delta).clamp(0, h as i64) as usize;
        }
        // keep boundaries monotone
        for k in 1..bounds.len() {
            bounds[k] = bounds[k].max(bounds[k - 1]);
        }
    }
    let mut values = vec![0u8; h * w];
    for k in 0..cfg.num_classes {
        for y in bounds[k]..bounds[k + 1] {
            values[y * w..(y + 1) * w].fill(k as u8);
        }
    }

    let [cmin, cmax] = cfg.object_count_range;
    let count = cmin + layout.below((cmax - cmin + 1) as u64) as usize;
    let [smin, smax] = cfg.object_size_range;
    let obj = cfg.object_class() as u8;
    for _ in 0..count {
        let oh = (smin + layout.below((smax - smin + 1) as u64) as usize).min(h);
        let ow = (smin + layout.below((smax - smin + 1) as u64) as usize).min(w);
        let y0 = layout.below((h - oh + 1) as u64) as usize;
        let x0 = layout.below((w - ow + 1) as u64) as usize;
        for y in y0..y0 + oh {
            values[y * w + x0..y * w + x0 + ow].fill(obj);
        }
    }

    let mut noise = SplitMix64::stream(seed, &[split, index, PURPOSE_NOISE]);
    let image =
        values.iter().map(|&c| cfg.class_intensity(c as usize) + cfg.base_noise_sigma * noise.normal()).collect();
    (LabelMap { height: h, width: w, values }, image)
}

/// Vertical translation by `offset` rows (positive moves content down), then
/// the appearance transform on the image.
fn apply_shift(
    cfg: &SceneConfig,
    seed: u64,
    split: u64,
    index: u64,
    labels: LabelMap,
    image: Vec<f64>,
) -> (LabelMap, Vec<f64>) {
    let (h, w) = (cfg.height, cfg.width);
    let off = cfg.shift.vertical_offset_px;
    let fill_class = if off >= 0 { cfg.top_band_class() } else { cfg.bottom_band_class() };
    let mut fill = SplitMix64::stream(seed, &[split, index, PURPOSE_FILL]);
    let mut out_labels = vec![0u8; h * w];
    let mut out_image = vec![0.0f64; h * w];
    for y in 0..h {
        let src = y as i64 - off;
        if (0..h as i64).contains(&src) {
            let s = src as usize;
            out_labels[y * w..(y + 1) * w].copy_from_slice(&labels.values[s * w..(s + 1) * w]);
            out_image[y * w..(y + 1) * w].copy_from_slice(&image[s * w..(s + 1) * w]);
        } else {
            out_labels[y * w..(y + 1) * w].fill(fill_class);
            for px in &mut out_image[y * w..(y + 1) * w] {
                *px = cfg.class_intensity(fill_class as usize) + cfg.base_noise_sigma * fill.normal();
            }
        }
    }
    let mut noise = SplitMix64::stream(seed, &[split, index, PURPOSE_SHIFT]);
    let s = &cfg.shift;
    for px in &mut out_image {
        *px = s.intensity_gain * *px + s.intensity_bias + s.noise_sigma * noise.normal();
    }
    (LabelMap { height: h, width: w, values: out_labels }, out_image)
}

fn to_image(cfg: &SceneConfig, pixels: Vec<f64>) -> Tensor<f32> {
    let data = pixels.into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![1, cfg.height, cfg.width], data).expect("image shape")
}

/// Render one scene of a split. Exposed for tests that need pre-shift renders.
pub fn render(cfg: &SceneConfig, domain: Domain, split: Split, index: u64) -> (LabelMap, Tensor<f32>) {
    match (domain, split) {
        (Domain::Source, _) => {
            let (l, img) = render_scene(cfg, cfg.source_seed, SPLIT_SOURCE_TRAIN, index);
            (l, to_image(cfg, img))
        }
        (Domain::Target, split) => {
            let tag = if split == Split::Train { SPLIT_TARGET_TRAIN } else { SPLIT_TARGET_TEST };
            let (l, img) = render_scene(cfg, cfg.target_seed, tag, index);
            let (l, img) = apply_shift(cfg, cfg.target_seed, tag, index, l, img);
            (l, to_image(cfg, img))
        }
    }
}

/// The unshifted render underlying a target scene.
pub fn render_unshifted(cfg: &SceneConfig, split: Split, index: u64) -> (LabelMap, Tensor<f32>) {
    let tag = if split == Split::Train { SPLIT_TARGET_TRAIN } else { SPLIT_TARGET_TEST };
    let (l, img) = render_scene(cfg, cfg.target_seed, tag, index);
    (l, to_image(cfg, img))
}

fn build(cfg: &SceneConfig, domain: Domain, split: Split, n: usize) -> (Vec<Tensor<f32>>, Vec<LabelMap>) {
    (0..n as u64)
        .map(|i| {
            let (l, img) = render(cfg, domain, split, i);
            (img, l)
        })
        .unzip()
}

pub fn generate_domain_pair(
    cfg: &SceneConfig,
    n_source: usize,
    n_target: usize,
    n_target_test: usize,
) -> Result<DomainPair> {
    cfg.validate()?;
    for (name, n) in [("n_source", n_source), ("n_target", n_target), ("n_target_test", n_target_test)] {
        if n == 0 || n > MAX_SCENES {
            return Err(Error::invalid(format!("{name} must be in [1, {MAX_SCENES}], got {n}")));
        }
    }
    let base = |domain, split, images, labels| DomainDataset {
        domain,
        split,
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        shift: (domain == Domain::Target).then(|| cfg.shift.clone()),
        images,
        labels,
    };
    let (si, sl) = build(cfg, Domain::Source, Split::Train, n_source);
    let (ti, tl) = build(cfg, Domain::Target, Split::Train, n_target);
    let (ei, el) = build(cfg, Domain::Target, Split::Test, n_target_test);
    Ok(DomainPair {
        source_train: base(Domain::Source, Split::Train, si, Some(sl)),
        target_train: base(Domain::Target, Split::Train, ti, None),
        target_test: base(Domain::Target, Split::Test, ei, Some(el)),
        target_train_labels: tl,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCounts {
    images: usize,
    labels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    image: String,
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    domain: Domain,
    split: Split,
    num_classes: usize,
    height: usize,
    width: usize,
    counts: ManifestCounts,
    shift: Option<DomainShift>,
    files: Vec<ManifestEntry>,
}

pub fn write_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let image = format!("img_{i:05}.pten");
        Pten::from_tensor(img).write(&dir.join(&image))?;
        let label = match &ds.labels {
            Some(labels) => {
                let name = format!("lbl_{i:05}.pten");
                let l = &labels[i];
                Pten::from_u8(vec![l.height, l.width], l.values.clone()).write(&dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        files.push(ManifestEntry { image, label });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        domain: ds.domain,
        split: ds.split,
        num_classes: ds.num_classes,
        height: ds.height,
        width: ds.width,
        counts: ManifestCounts { images: ds.len(), labels: ds.labels.as_ref().map_or(0, Vec::len) },
        shift: ds.shift.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<DomainDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::parse(&path, format!("unsupported manifest version {}", m.version)));
    }
    if m.counts.images != m.files.len() {
        return Err(Error::parse(&path, "image count does not match file list"));
    }
    let n_labels = m.files.iter().filter(|f| f.label.is_some()).count();
    if n_labels != m.counts.labels || (n_labels != 0 && n_labels != m.files.len()) {
        return Err(Error::parse(&path, "label entries inconsistent with counts"));
    }
    let mut images = Vec::with_capacity(m.files.len());
    let mut labels = Vec::with_capacity(n_labels);
    for entry in &m.files {
        let ipath = dir.join(&entry.image);
        let img = Pten::read(&ipath)?.into_tensor().map_err(|e| Error::parse(&ipath, e.to_string()))?;
        if img.shape() != [1, m.height, m.width] {
            return Err(Error::parse(&ipath, format!("image shape {:?}", img.shape())));
        }
        images.push(img);
        if let Some(name) = &entry.label {
            let lpath = dir.join(name);
            let p = Pten::read(&lpath)?;
            let PtenData::U8(values) = p.data else {
                return Err(Error::parse(&lpath, "label payload must be u8"));
            };
            if p.shape != [m.height, m.width] {
                return Err(Error::parse(&lpath, format!("label shape {:?}", p.shape)));
            }
            let l = LabelMap::new(m.height, m.width, values)?;
            l.validate(m.num_classes).map_err(|e| Error::parse(&lpath, e.to_string()))?;
            labels.push(l);
        }
    }
    Ok(DomainDataset {
        domain: m.domain,
        split: m.split,
        num_classes: m.num_classes,
        height: m.height,
        width: m.width,
        shift: m.shift,
        images,
        labels: (n_labels > 0).then_some(labels),
    })
}

//! Patch mode discovery.
//!
//! Each label patch is summarized by a 2×2 spatial label histogram: the patch
//! is split at `floor(h/2)`, `floor(w/2)` into quadrants (top-left, top-right,
//! bottom-left, bottom-right), and each quadrant contributes its normalized
//! class frequencies. K-means over sampled histograms yields the patch modes;
//! [`cluster_map`] assigns every grid cell of a label map to its mode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::pten::Pten;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::synthdata::{LabelMap, IGNORE_LABEL};

/// Non-overlapping tiling from the top-left corner; residual border pixels are
/// not covered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h < 2 || patch_w < 2 {
            return Err(Error::invalid(format!("patch must be at least 2x2, got {patch_h}x{patch_w}")));
        }
        if patch_h > height || patch_w > width {
            return Err(Error::invalid(format!("patch {patch_h}x{patch_w} larger than image {height}x{width}")));
        }
        Ok(Self { patch_h, patch_w, rows: height / patch_h, cols: width / patch_w })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.rows * self.patch_h <= height && self.cols * self.patch_w <= width
    }
}

/// Histogram of the `h×w` window at `(y0, x0)`; length `4·C`.
pub fn window_histogram(
    labels: &LabelMap,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    num_classes: usize,
) -> Result<Vec<f64>> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("patch must be at least 2x2, got {h}x{w}")));
    }
    if y0 + h > labels.height || x0 + w > labels.width {
        return Err(Error::shape("patch window outside label map"));
    }
    let (mh, mw) = (h / 2, w / 2);
    let mut hist = vec![0.0; 4 * num_classes];
    let mut counts = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y0 + y, x0 + x);
            if v == IGNORE_LABEL {
                continue;
            }
            if v as usize >= num_classes {
                return Err(Error::invalid(format!("label {v} out of range for {num_classes} classes")));
            }
            let q = 2 * usize::from(y >= mh) + usize::from(x >= mw);
            hist[q * num_classes + v as usize] += 1.0;
            counts[q] += 1;
        }
    }
    for (q, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in &mut hist[q * num_classes..(q + 1) * num_classes] {
                *v /= n as f64;
            }
        }
    }
    Ok(hist)
}

pub fn extract_patch_histogram(patch: &LabelMap, num_classes: usize) -> Result<Vec<f64>> {
    window_histogram(patch, 0, 0, patch.height, patch.width, num_classes)
}

/// `n` histograms from grid cells drawn uniformly with replacement over
/// `(image, cell)` pairs.
pub fn sample_patches(
    label_maps: &[LabelMap],
    grid: &PatchGrid,
    n: usize,
    k: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if label_maps.is_empty() {
        return Err(Error::invalid("no label maps to sample from"));
    }
    if n < k {
        return Err(Error::invalid(format!("need at least K={k} samples, got {n}")));
    }
    let mut rng = SplitMix64::stream(seed, &[0x5a4d_504c]);
    (0..n)
        .map(|_| {
            let img = rng.below(label_maps.len() as u64) as usize;
            let cell = rng.below(grid.cells() as u64) as usize;
            let (r, c) = (cell / grid.cols, cell % grid.cols);
            window_histogram(
                &label_maps[img],
                r * grid.patch_h,
                c * grid.patch_w,
                grid.patch_h,
                grid.patch_w,
                num_classes,
            )
        })
        .collect()
}

/// K centroids in `dim` dimensions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

impl ClusterModel {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lowest id.
    pub fn assign(&self, h: &[f64]) -> usize {
        nearest(&self.centroids, self.dim, h).0
    }
}

pub fn assign_cluster(h: &[f64], model: &ClusterModel) -> usize {
    model.assign(h)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Diagnostics of one Lloyd run.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn check_vectors(vectors: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if vectors.len() < k {
        return Err(Error::invalid(format!("need at least K={k} vectors, got {}", vectors.len())));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("vectors must share a positive dimension"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    Ok(dim)
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn kmeans_pp(vectors: &[Vec<f64>], k: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = SplitMix64::stream(seed, &[0x6b6d_7070]);
    let n = vectors.len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&vectors[rng.below(n as u64) as usize]);
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!("fewer than K={k} distinct vectors")));
        }
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"));
        let start = centroids.len();
        centroids.extend_from_slice(&vectors[pick]);
        for (v, d) in vectors.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(v, &centroids[start..start + dim]));
        }
    }
    Ok(centroids)
}

fn assign_all(vectors: &[Vec<f64>], centroids: &[f64], dim: usize, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (v, a) in vectors.iter().zip(out.iter_mut()) {
        let (i, d) = nearest(centroids, dim, v);
        *a = i;
        inertia += d;
    }
    inertia
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(vectors: &[Vec<f64>], init: Vec<f64>, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    let dim = vectors.first().map_or(0, Vec::len);
    if dim == 0 || init.is_empty() || !init.len().is_multiple_of(dim) {
        return Err(Error::shape("initial centroids do not match vector dimension"));
    }
    let k = init.len() / dim;
    check_vectors(vectors, k)?;
    let n = vectors.len();
    let mut centroids = init;
    let mut assignments = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let inertia = assign_all(vectors, &centroids, dim, &mut next);
        history.push(inertia);
        let unchanged = next == assignments;
        std::mem::swap(&mut assignments, &mut next);
        if unchanged || iterations >= max_iter {
            break;
        }
        iterations += 1;

        // centroid update, summing in point-index order
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut movement = 0.0f64;
        let mut reseeded = false;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * dim..(c + 1) * dim].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // empty cluster: take the point farthest from its own centroid
                let far = (0..n)
                    .map(|i| (i, sq_dist(&vectors[i], &centroids[assignments[i] * dim..(assignments[i] + 1) * dim])))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
                if far.1 > 0.0 {
                    reseeded = true;
                    vectors[far.0].clone()
                } else {
                    centroids[c * dim..(c + 1) * dim].to_vec()
                }
            };
            movement = movement.max(sq_dist(&new, &centroids[c * dim..(c + 1) * dim]).sqrt());
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        if movement < tol && !reseeded {
            let inertia = assign_all(vectors, &centroids, dim, &mut next);
            history.push(inertia);
            std::mem::swap(&mut assignments, &mut next);
            break;
        }
    }

    let inertia = *history.last().expect("at least one assignment");
    Ok(KMeansFit {
        model: ClusterModel { k, dim, centroids, inertia },
        assignments,
        inertia_history: history,
        iterations,
    })
}

pub fn kmeans_fit_detailed(vectors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    let dim = check_vectors(vectors, k)?;
    let init = kmeans_pp(vectors, k, dim, seed)?;
    lloyd(vectors, init, max_iter, tol)
}

pub fn kmeans_fit(vectors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    Ok(kmeans_fit_detailed(vectors, k, seed, max_iter, tol)?.model)
}

/// Γ(Y): cluster id per grid cell plus a validity mask (false for cells whose
/// pixels are all ignored).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

pub fn cluster_map(
    labels: &LabelMap,
    grid: &PatchGrid,
    model: &ClusterModel,
    num_classes: usize,
) -> Result<ClusterMap> {
    if !grid.fits(labels.height, labels.width) {
        return Err(Error::shape("patch grid does not fit label map"));
    }
    if model.dim != 4 * num_classes {
        return Err(Error::shape(format!(
            "cluster model has dimension {}, histograms have {}",
            model.dim,
            4 * num_classes
        )));
    }
    let mut ids = Vec::with_capacity(grid.cells());
    let mut valid = Vec::with_capacity(grid.cells());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let h =
                window_histogram(labels, r * grid.patch_h, c * grid.patch_w, grid.patch_h, grid.patch_w, num_classes)?;
            let any = h.iter().any(|&x| x > 0.0);
            ids.push(if any { model.assign(&h) } else { 0 });
            valid.push(any);
        }
    }
    Ok(ClusterMap { rows: grid.rows, cols: grid.cols, ids, valid })
}

/// Sidecar written next to `centroids.pten`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesMeta {
    pub k: usize,
    pub num_classes: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub seed: u64,
    pub inertia: f64,
    pub n_samples: usize,
}

pub fn save_modes(model: &ClusterModel, meta: &ModesMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = model.centroids.iter().map(|&x| x as f32).collect();
    let t = Tensor::new(vec![model.k, model.dim], data)?;
    Pten::from_tensor(&t).write(&dir.join("centroids.pten"))?;
    let path = dir.join("modes.json");
    let text = serde_json::to_string_pretty(meta).expect("serializable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_modes(dir: &Path) -> Result<(ClusterModel, ModesMeta)> {
    let path = dir.join("modes.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: ModesMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let cpath = dir.join("centroids.pten");
    let t = Pten::read(&cpath)?.into_tensor().map_err(|e| Error::parse(&cpath, e.to_string()))?;
    if t.shape() != [meta.k, 4 * meta.num_classes] {
        return Err(Error::parse(&cpath, format!("centroid shape {:?} disagrees with modes.json", t.shape())));
    }
    let model = ClusterModel {
        k: meta.k,
        dim: 4 * meta.num_classes,
        centroids: t.data().iter().map(|&x| x as f64).collect(),
        inertia: meta.inertia,
    };
    Ok((model, meta))
}

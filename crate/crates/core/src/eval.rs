//! Segmentation metrics and patch-feature export.

use std::fmt::Write as _;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{LabelMap, IGNORE_LABEL};

/// Rows are ground truth, columns predictions. Ignore pixels are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Self {
        let c = rows.len();
        Self { num_classes: c, counts: rows.concat() }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction map; returns the number of scored pixels.
    pub fn add(&mut self, truth: &LabelMap, pred: &[u8]) -> Result<u64> {
        if pred.len() != truth.values.len() {
            return Err(Error::shape("prediction and label map sizes differ"));
        }
        let c = self.num_classes;
        let mut scored = 0;
        for (&t, &p) in truth.values.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::invalid(format!("class id out of range for {c} classes")));
            }
            self.counts[t as usize * c + p as usize] += 1;
            scored += 1;
        }
        Ok(scored)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        diag as f64 / total as f64
    }
}

/// Per-class IoU (`None` for classes absent from both truth and prediction)
/// and their mean over the defined classes.
pub fn iou_from_confusion(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let c = cm.num_classes;
    let ious: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    (ious, miou)
}

/// Per-pixel argmax over channels of a `C×H×W` map; ties go to the lowest class.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = probs.dims3()?;
    let sites = h * w;
    let d = probs.data();
    Ok((0..sites)
        .map(|s| {
            let mut best = 0;
            for k in 1..c {
                if d[k * sites + s] > d[best * sites + s] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// One patch-feature map to export.
pub struct FeatureMap<'a> {
    pub features: &'a Tensor<f32>,
    pub domain: &'a str,
    pub id: u64,
}

/// CSV with header `id,domain,u,v,f0..f{K-1}` and one row per site, sorted by
/// `(id, u, v)`. Values carry nine significant digits.
pub fn export_features(maps: &[FeatureMap<'_>]) -> Result<String> {
    let Some(first) = maps.first() else {
        return Err(Error::invalid("no feature maps to export"));
    };
    let (k, _, _) = first.features.dims3()?;
    for m in maps {
        let (mk, _, _) = m.features.dims3()?;
        if mk != k {
            return Err(Error::shape(format!("feature maps have K={k} and K={mk}")));
        }
        if m.domain.contains(',') || m.domain.contains('\n') {
            return Err(Error::invalid("domain tag must not contain commas or newlines"));
        }
    }
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by_key(|&i| maps[i].id);

    let mut out = String::from("id,domain,u,v");
    for j in 0..k {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in order {
        let m = &maps[i];
        let (_, u, v) = m.features.dims3()?;
        let d = m.features.data();
        for r in 0..u {
            for c in 0..v {
                let _ = write!(out, "{},{},{r},{c}", m.id, m.domain);
                for j in 0..k {
                    let _ = write!(out, ",{:.8e}", d[j * u * v + r * v + c]);
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// A parsed feature row: `(id, domain, u, v, values)`.
pub type FeatureRow = (u64, String, usize, usize, Vec<f32>);

pub fn parse_features(csv: &str) -> Result<Vec<FeatureRow>> {
    let bad = |line: usize, msg: &str| Error::invalid(format!("features.csv line {line}: {msg}"));
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let k = header.split(',').count().saturating_sub(4);
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + k {
                return Err(bad(i + 2, "wrong field count"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 2, "bad integer"));
            let values = f[4..]
                .iter()
                .map(|s| s.parse::<f32>().map_err(|_| bad(i + 2, "bad float")))
                .collect::<Result<Vec<_>>>()?;
            Ok((num(f[0])?, f[1].to_string(), num(f[2])? as usize, num(f[3])? as usize, values))
        })
        .collect()
}

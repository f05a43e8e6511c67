//! Training objectives. All reductions are sums over pixels or grid sites.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_sites, Backward, BackwardCtx, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::patchmodes::{ClusterMap, PatchGrid};
use crate::synthdata::{LabelMap, IGNORE_LABEL};

/// Lower clamp applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn safe_ln<T: Real>(x: T) -> T {
    x.max(T::lit(LOG_FLOOR)).ln()
}

/// d/dx of `safe_ln`; zero where the clamp is active.
#[inline]
fn safe_ln_grad<T: Real>(x: T) -> T {
    if x >= T::lit(LOG_FLOOR) {
        T::one() / x
    } else {
        T::zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_d: 0.01, lambda_adv: 0.0005 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub tau: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

/// Negative log-likelihood of the selected channel at each listed site.
/// `picks` holds `(channel, site)` pairs.
struct PickNll {
    picks: Vec<(usize, usize)>,
    sites: usize,
}

impl PickNll {
    fn forward<T: Real>(&self, p: &[T]) -> T {
        let mut total = T::zero();
        for &(k, s) in &self.picks {
            total -= safe_ln(p[k * self.sites + s]);
        }
        total
    }
}

impl<T: Real> Backward<T> for PickNll {
    fn name(&self) -> &'static str {
        "pick_nll"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = ctx.inputs[0];
        let mut gx = Tensor::zeros(p.shape());
        let go = g.item();
        for &(k, s) in &self.picks {
            let i = k * self.sites + s;
            gx.data_mut()[i] -= go * safe_ln_grad(p.data()[i]);
        }
        vec![Some(gx)]
    }
}

/// `−Σ log O[Y(h,w), h, w]` over non-ignore pixels.
pub fn seg_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &LabelMap) -> Result<Var> {
    let (c, h, w) = g.value(probs).dims3()?;
    if (h, w) != (labels.height, labels.width) {
        return Err(Error::shape(format!("prediction {h}x{w} vs labels {}x{}", labels.height, labels.width)));
    }
    let mut picks = Vec::with_capacity(h * w);
    for (s, &v) in labels.values.iter().enumerate() {
        if v == IGNORE_LABEL {
            continue;
        }
        if v as usize >= c {
            return Err(Error::invalid(format!("label {v} out of range for {c} classes")));
        }
        picks.push((v as usize, s));
    }
    if picks.is_empty() {
        return Err(Error::invalid("label map is entirely ignored"));
    }
    let op = PickNll { picks, sites: h * w };
    let value = op.forward(g.value(probs).data());
    Ok(g.record(Tensor::scalar(value), &[probs], Box::new(op)))
}

/// `−Σ log F[Γ(u,v), u, v]` over valid sites.
pub fn disc_cluster_loss<T: Real>(g: &mut Graph<T>, features: Var, gamma: &ClusterMap) -> Result<Var> {
    let (k, u, v) = g.value(features).dims3()?;
    if (u, v) != (gamma.rows, gamma.cols) {
        return Err(Error::shape(format!("feature grid {u}x{v} vs cluster map {}x{}", gamma.rows, gamma.cols)));
    }
    let mut picks = Vec::with_capacity(u * v);
    for (s, (&id, &ok)) in gamma.ids.iter().zip(&gamma.valid).enumerate() {
        if !ok {
            continue;
        }
        if id >= k {
            return Err(Error::invalid(format!("cluster id {id} out of range for K={k}")));
        }
        picks.push((id, s));
    }
    let op = PickNll { picks, sites: u * v };
    let value = op.forward(g.value(features).data());
    Ok(g.record(Tensor::scalar(value), &[features], Box::new(op)))
}

fn check_probabilities<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
        return Err(Error::invalid(format!("{what} values must lie in [0, 1]")));
    }
    Ok(())
}

struct BceOp {
    /// true: `−log x`; false: `−log(1 − x)`
    positive: bool,
}

impl BceOp {
    fn forward<T: Real>(&self, x: &[T]) -> T {
        x.iter().map(|&p| if self.positive { -safe_ln(p) } else { -safe_ln(T::one() - p) }).sum()
    }
}

impl<T: Real> Backward<T> for BceOp {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let go = g.item();
        let data = x
            .data()
            .iter()
            .map(|&p| if self.positive { -go * safe_ln_grad(p) } else { go * safe_ln_grad(T::one() - p) })
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
    }
}

fn bce<T: Real>(g: &mut Graph<T>, x: Var, positive: bool) -> Var {
    let op = BceOp { positive };
    let value = op.forward(g.value(x).data());
    g.record(Tensor::scalar(value), &[x], Box::new(op))
}

/// `−Σ [log D_s + log(1 − D_t)]`; source is labeled 1, target 0.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, d_source: Var, d_target: Var) -> Result<Var> {
    check_probabilities(g.value(d_source), "D(F_s)")?;
    check_probabilities(g.value(d_target), "D(F_t)")?;
    let ls = bce(g, d_source, true);
    let lt = bce(g, d_target, false);
    g.add(ls, lt)
}

/// `−Σ log D_t`: target patches labeled as source.
pub fn generator_adv_loss<T: Real>(g: &mut Graph<T>, d_target: Var) -> Result<Var> {
    check_probabilities(g.value(d_target), "D(F_t)")?;
    Ok(bce(g, d_target, true))
}

/// `L_s + λ_d·L_d + λ_adv·adv`, skipping absent terms.
pub fn total_generator_loss<T: Real>(
    g: &mut Graph<T>,
    seg: Var,
    cluster: Option<Var>,
    adv: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = seg;
    if let Some(ld) = cluster {
        let term = g.scale(ld, T::lit(weights.lambda_d));
        total = g.add(total, term)?;
    }
    if let Some(adv) = adv {
        let term = g.scale(adv, T::lit(weights.lambda_adv));
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `Σ_sites −Σ_k p_k log p_k` with `p = softmax(logits / τ)`.
pub fn entropy_loss<T: Real>(g: &mut Graph<T>, logits: Var, cfg: &EntropyConfig) -> Result<Var> {
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(Error::invalid("entropy temperature must be positive"));
    }
    let v = g.value(logits);
    if !v.is_finite() {
        return Err(Error::NonFinite("entropy_loss logits"));
    }
    let (k, h, w) = v.dims3()?;
    let sites = h * w;
    let p = softmax_sites(v.data(), k, sites, T::lit(1.0 / cfg.tau));
    let mut site_entropy = vec![T::zero(); sites];
    for c in 0..k {
        for s in 0..sites {
            let pi = p[c * sites + s];
            site_entropy[s] -= pi * safe_ln(pi);
        }
    }
    let total = site_entropy.iter().copied().sum();
    let op = EntropyOp { p, site_entropy, k, sites, inv_tau: 1.0 / cfg.tau };
    Ok(g.record(Tensor::scalar(total), &[logits], Box::new(op)))
}

struct EntropyOp<T> {
    p: Vec<T>,
    site_entropy: Vec<T>,
    k: usize,
    sites: usize,
    inv_tau: f64,
}

impl<T: Real> Backward<T> for EntropyOp<T> {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        // dH/dz_j = −(1/τ) · p_j · (log p_j + H)
        let scale = g.item() * T::lit(self.inv_tau);
        let mut gx = vec![T::zero(); self.k * self.sites];
        for c in 0..self.k {
            for s in 0..self.sites {
                let i = c * self.sites + s;
                let pi = self.p[i];
                gx[i] = -scale * pi * (safe_ln(pi) + self.site_entropy[s]);
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx).expect("shape"))]
    }
}

/// Quadrant means of `O` per grid cell: a differentiable 2×2 spatial
/// histogram with `4·C` channels on the `U×V` grid. Channel `q·C + k` holds
/// class `k` in quadrant `q` (TL, TR, BL, BR).
pub fn soft_histogram<T: Real>(g: &mut Graph<T>, probs: Var, grid: &PatchGrid) -> Result<Var> {
    let (c, h, w) = g.value(probs).dims3()?;
    if grid.patch_h < 2 || grid.patch_w < 2 {
        return Err(Error::invalid("soft_histogram needs patches of at least 2x2"));
    }
    if !grid.fits(h, w) {
        return Err(Error::shape("patch grid does not fit prediction"));
    }
    let op = QuadrantPool { c, h, w, grid: *grid };
    let x = g.value(probs).data();
    let (u, v) = (grid.rows, grid.cols);
    let mut out = vec![T::zero(); 4 * c * u * v];
    op.for_each(|k, q, cell, idx, area| {
        out[(q * c + k) * u * v + cell] += x[idx] / T::lit(area as f64);
    });
    let out = Tensor::new(vec![4 * c, u, v], out)?;
    Ok(g.record(out, &[probs], Box::new(op)))
}

struct QuadrantPool {
    c: usize,
    h: usize,
    w: usize,
    grid: PatchGrid,
}

impl QuadrantPool {
    /// Visits `(class, quadrant, cell, input index, quadrant area)` for every covered pixel.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let PatchGrid { patch_h: ph, patch_w: pw, rows, cols } = self.grid;
        let (mh, mw) = (ph / 2, pw / 2);
        let qh = [mh, mh, ph - mh, ph - mh];
        let qw = [mw, pw - mw, mw, pw - mw];
        for k in 0..self.c {
            for r in 0..rows {
                for cc in 0..cols {
                    let cell = r * cols + cc;
                    for y in 0..ph {
                        for x in 0..pw {
                            let q = 2 * usize::from(y >= mh) + usize::from(x >= mw);
                            let idx = k * self.h * self.w + (r * ph + y) * self.w + cc * pw + x;
                            f(k, q, cell, idx, qh[q] * qw[q]);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Backward<T> for QuadrantPool {
    fn name(&self) -> &'static str {
        "soft_histogram"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (u, v, c) = (self.grid.rows, self.grid.cols, self.c);
        let go = g.data();
        let mut gx = vec![T::zero(); c * self.h * self.w];
        self.for_each(|k, q, cell, idx, area| {
            gx[idx] += go[(q * c + k) * u * v + cell] / T::lit(area as f64);
        });
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx).expect("shape"))]
    }
}

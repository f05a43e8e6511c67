//! Differentiable layer primitives on `C×H×W` tensors.

use super::graph::{Backward, BackwardCtx, Graph, Var};
use super::tensor::{axpy, dot, sum, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Range of output columns `ox` for which `ox*stride + k - pad` lands in `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest ox with ox*stride + k - pad <= in_len - 1
    let top = in_len + pad;
    let hi = if top > k { ((top - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

pub fn conv2d<T: Real>(
    g: &mut Graph<T>,
    input: Var,
    kernels: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (ci, h, w) = g.value(input).dims3()?;
    let ks = g.value(kernels).shape().to_vec();
    let [co, kci, kh, kw] = ks[..] else {
        return Err(Error::shape(format!("conv2d kernels must be rank 4, got {ks:?}")));
    };
    if kci != ci {
        return Err(Error::shape(format!("conv2d kernels expect {kci} input channels, input has {ci}")));
    }
    if g.value(bias).shape() != [co] {
        return Err(Error::shape(format!("conv2d bias must have shape [{co}], got {:?}", g.value(bias).shape())));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape("conv2d kernel larger than padded input"));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let geom = ConvGeom { ci, h, w, co, kh, kw, oh, ow, stride, padding };

    let x = g.value(input).data();
    let k = g.value(kernels).data();
    let b = g.value(bias).data();
    let mut out = vec![T::zero(); co * oh * ow];
    for oc in 0..co {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(b[oc]);
        for ic in 0..ci {
            let xp = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((oc * ci + ic) * kh + ky) * kw + kx];
                    geom.for_each_row(ky, kx, |oy, iy, lo, hi| {
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let irow = &xp[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let ix0 = lo + kx - padding;
                            axpy(&mut orow[lo..hi], wv, &irow[ix0..ix0 + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * irow[ox * stride + kx - padding];
                            }
                        }
                    });
                }
            }
        }
    }
    let out = Tensor::new(vec![co, oh, ow], out)?;
    Ok(g.record(out, &[input, kernels, bias], Box::new(Conv2dOp(geom))))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Calls `f(oy, iy, ox_lo, ox_hi)` for every output row whose input row is in bounds.
    #[inline]
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (lo, hi) = valid_range(self.ow, self.w, kx, self.stride, self.padding);
        if lo >= hi {
            return;
        }
        let (ylo, yhi) = valid_range(self.oh, self.h, ky, self.stride, self.padding);
        for oy in ylo..yhi {
            let iy = oy * self.stride + ky - self.padding;
            f(oy, iy, lo, hi);
        }
    }
}

struct Conv2dOp(ConvGeom);

impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let ConvGeom { ci, h, w, co, kh, kw, oh, ow, stride, padding } = self.0;
        let x = ctx.inputs[0].data();
        let k = ctx.inputs[1].data();
        let go = g.data();

        let mut gx = ctx.needs[0].then(|| vec![T::zero(); ci * h * w]);
        let mut gk = ctx.needs[1].then(|| vec![T::zero(); co * ci * kh * kw]);
        for oc in 0..co {
            let gp = &go[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..ci {
                let xp = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = k[widx];
                        let mut acc = T::zero();
                        self.0.for_each_row(ky, kx, |oy, iy, lo, hi| {
                            let grow = &gp[oy * ow + lo..oy * ow + hi];
                            if stride == 1 {
                                let ix0 = lo + kx - padding;
                                if let Some(gx) = gx.as_mut() {
                                    let row = &mut gx[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                                    axpy(&mut row[ix0..ix0 + (hi - lo)], wv, grow);
                                }
                                if gk.is_some() {
                                    let irow = &xp[iy * w + ix0..iy * w + ix0 + (hi - lo)];
                                    acc += dot(grow, irow);
                                }
                            } else {
                                for (j, ox) in (lo..hi).enumerate() {
                                    let ix = ox * stride + kx - padding;
                                    if let Some(gx) = gx.as_mut() {
                                        gx[ic * h * w + iy * w + ix] += wv * grow[j];
                                    }
                                    acc += grow[j] * xp[iy * w + ix];
                                }
                            }
                        });
                        if let Some(gk) = gk.as_mut() {
                            gk[widx] = acc;
                        }
                    }
                }
            }
        }
        let gb = ctx.needs[2].then(|| {
            let data = (0..co).map(|oc| sum(&go[oc * oh * ow..(oc + 1) * oh * ow])).collect();
            Tensor::new(vec![co], data).expect("bias shape")
        });
        vec![
            gx.map(|d| Tensor::new(vec![ci, h, w], d).expect("input shape")),
            gk.map(|d| Tensor::new(vec![co, ci, kh, kw], d).expect("kernel shape")),
            gb,
        ]
    }
}

/// Floor-boundary bins: output index `i` covers `[floor(i*n/m), floor((i+1)*n/m))`.
fn pool_bins(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, (i + 1) * n / m)).collect()
}

pub fn adaptive_avg_pool2d<T: Real>(g: &mut Graph<T>, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let (c, h, w) = g.value(input).dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_avg_pool2d output size must be positive"));
    }
    if out_h > h || out_w > w {
        return Err(Error::invalid(format!("adaptive_avg_pool2d output {out_h}x{out_w} exceeds input {h}x{w}")));
    }
    let rows = pool_bins(h, out_h);
    let cols = pool_bins(w, out_w);
    let x = g.value(input).data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = T::zero();
                for y in r0..r1 {
                    acc += sum(&p[y * w + c0..y * w + c1]);
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    let out = Tensor::new(vec![c, out_h, out_w], out)?;
    Ok(g.record(out, &[input], Box::new(AvgPoolOp { rows, cols, c, h, w })))
}

struct AvgPoolOp {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
    c: usize,
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool2d"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = (self.c, self.h, self.w);
        let go = g.data();
        let mut gx = vec![T::zero(); c * h * w];
        let mut idx = 0;
        for ch in 0..c {
            for &(r0, r1) in &self.rows {
                for &(c0, c1) in &self.cols {
                    let v = go[idx] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                    idx += 1;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            gx[ch * h * w + y * w + x] += v;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![c, h, w], gx).expect("input shape"))]
    }
}

/// Channel softmax of `logits` at every site, with max-subtraction. `inv_temp`
/// scales the logits first.
pub(crate) fn softmax_sites<T: Real>(x: &[T], c: usize, sites: usize, inv_temp: T) -> Vec<T> {
    let mut out = vec![T::zero(); c * sites];
    for s in 0..sites {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(x[k * sites + s] * inv_temp);
        }
        let mut z = T::zero();
        for k in 0..c {
            let e = (x[k * sites + s] * inv_temp - m).exp();
            out[k * sites + s] = e;
            z += e;
        }
        for k in 0..c {
            out[k * sites + s] = out[k * sites + s] / z;
        }
    }
    out
}

pub fn softmax_channel<T: Real>(g: &mut Graph<T>, input: Var) -> Result<Var> {
    let v = g.value(input);
    if !v.is_finite() {
        return Err(Error::NonFinite("softmax_channel input"));
    }
    let (c, h, w) = v.dims3()?;
    let out = softmax_sites(v.data(), c, h * w, T::one());
    let out = Tensor::new(vec![c, h, w], out)?;
    Ok(g.record(out, &[input], Box::new(SoftmaxOp)))
}

struct SoftmaxOp;

impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_channel"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = ctx.output.dims3().expect("rank 3");
        let sites = h * w;
        let p = ctx.output.data();
        let go = g.data();
        let mut gx = vec![T::zero(); c * sites];
        for s in 0..sites {
            let mut inner = T::zero();
            for k in 0..c {
                inner += p[k * sites + s] * go[k * sites + s];
            }
            for k in 0..c {
                let i = k * sites + s;
                gx[i] = p[i] * (go[i] - inner);
            }
        }
        vec![Some(Tensor::new(vec![c, h, w], gx).expect("shape"))]
    }
}

pub fn activation<T: Real>(g: &mut Graph<T>, input: Var, kind: Activation) -> Result<Var> {
    if let Activation::LeakyRelu(s) = kind {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::invalid(format!("leaky_relu slope must be in (0,1), got {s}")));
        }
    }
    let v = g.value(input);
    let data: Vec<T> = match kind {
        Activation::Relu => v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        Activation::LeakyRelu(s) => {
            let s = T::lit(s);
            v.data().iter().map(|&x| if x > T::zero() { x } else { x * s }).collect()
        }
        Activation::Sigmoid => v.data().iter().map(|&x| sigmoid(x)).collect(),
    };
    let out = Tensor::new(v.shape().to_vec(), data)?;
    Ok(g.record(out, &[input], Box::new(ActivationOp(kind))))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ActivationOp(Activation);

impl<T: Real> Backward<T> for ActivationOp {
    fn name(&self) -> &'static str {
        "activation"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let go = g.data();
        // derivative at exactly 0 takes the negative-side slope
        let data: Vec<T> = match self.0 {
            Activation::Relu => {
                x.iter().zip(go).map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() }).collect()
            }
            Activation::LeakyRelu(s) => {
                let s = T::lit(s);
                x.iter().zip(go).map(|(&xi, &gi)| if xi > T::zero() { gi } else { gi * s }).collect()
            }
            Activation::Sigmoid => y.iter().zip(go).map(|(&yi, &gi)| gi * yi * (T::one() - yi)).collect(),
        };
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
    }
}

/// Dense layer applied independently at every spatial site (a 1×1 convolution).
pub fn linear_per_location<T: Real>(g: &mut Graph<T>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let (ci, h, w) = g.value(input).dims3()?;
    let ws = g.value(weight).shape().to_vec();
    let [co, wci] = ws[..] else {
        return Err(Error::shape(format!("linear weight must be rank 2, got {ws:?}")));
    };
    if wci != ci {
        return Err(Error::shape(format!("linear weight expects {wci} input channels, input has {ci}")));
    }
    if g.value(bias).shape() != [co] {
        return Err(Error::shape(format!("linear bias must have shape [{co}], got {:?}", g.value(bias).shape())));
    }
    let sites = h * w;
    let x = g.value(input).data();
    let wt = g.value(weight).data();
    let b = g.value(bias).data();
    let mut out = vec![T::zero(); co * sites];
    for o in 0..co {
        let row = &mut out[o * sites..(o + 1) * sites];
        row.fill(b[o]);
        for i in 0..ci {
            axpy(row, wt[o * ci + i], &x[i * sites..(i + 1) * sites]);
        }
    }
    let out = Tensor::new(vec![co, h, w], out)?;
    Ok(g.record(out, &[input, weight, bias], Box::new(LinearOp { ci, co, sites })))
}

struct LinearOp {
    ci: usize,
    co: usize,
    sites: usize,
}

impl<T: Real> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear_per_location"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (ci, co, sites) = (self.ci, self.co, self.sites);
        let x = ctx.inputs[0].data();
        let wt = ctx.inputs[1].data();
        let go = g.data();
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![T::zero(); ci * sites];
            for o in 0..co {
                for i in 0..ci {
                    axpy(&mut gx[i * sites..(i + 1) * sites], wt[o * ci + i], &go[o * sites..(o + 1) * sites]);
                }
            }
            Tensor::new(ctx.inputs[0].shape().to_vec(), gx).expect("shape")
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![T::zero(); co * ci];
            for o in 0..co {
                for i in 0..ci {
                    gw[o * ci + i] = dot(&go[o * sites..(o + 1) * sites], &x[i * sites..(i + 1) * sites]);
                }
            }
            Tensor::new(vec![co, ci], gw).expect("shape")
        });
        let gb = ctx.needs[2].then(|| {
            let data = (0..co).map(|o| sum(&go[o * sites..(o + 1) * sites])).collect();
            Tensor::new(vec![co], data).expect("shape")
        });
        vec![gx, gw, gb]
    }
}

//! The segmentation network G, the categorization head H and the per-location
//! discriminator D.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    activation, adaptive_avg_pool2d, conv2d, linear_per_location, softmax_channel, Activation, Graph, Real, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::patchmodes::PatchGrid;
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

/// Stride-1 same-padded convolutions with ReLU between them; the last layer
/// projects to the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
    pub zero_init_final: bool,
}

impl GConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            layers: vec![
                ConvSpec { out_channels: 16, kernel: 3, padding: 1 },
                ConvSpec { out_channels: 32, kernel: 3, padding: 1 },
                ConvSpec { out_channels: num_classes, kernel: 1, padding: 0 },
            ],
            zero_init_final: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.in_channels == 0 {
            return Err(Error::invalid("G needs at least one layer and one input channel"));
        }
        for l in &self.layers {
            if l.out_channels == 0 || l.kernel == 0 || l.kernel % 2 == 0 || 2 * l.padding + 1 != l.kernel {
                return Err(Error::invalid(format!("G layer {l:?} must be an odd same-padded kernel")));
            }
        }
        Ok(())
    }
}

/// Pool to the patch grid, then two per-location layers ending in K channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub k: usize,
    pub slope: f64,
    pub zero_init_final: bool,
}

impl HConfig {
    pub fn desk(num_classes: usize, k: usize) -> Self {
        Self { in_channels: num_classes, hidden: 64, k, slope: 0.2, zero_init_final: true }
    }
}

/// Per-location MLP with leaky-ReLU hidden layers and a sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub slope: f64,
    pub zero_init_final: bool,
}

impl DConfig {
    pub fn desk(in_channels: usize) -> Self {
        Self { in_channels, widths: vec![64, 128, 1], slope: 0.2, zero_init_final: true }
    }

    /// The {256, 512, 1} widths used at full image scale.
    pub fn wide(in_channels: usize) -> Self {
        Self { widths: vec![256, 512, 1], ..Self::desk(in_channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.last() != Some(&1) || self.widths.contains(&0) {
            return Err(Error::invalid("D widths must be positive and end in 1"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Leaves in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Weights ~ U(−b, b) with `b = sqrt(6 / fan_in)`, biases zero. Each tensor
/// draws from its own stream keyed by `(seed, net tag, tensor index)`.
fn init_layer<T: Real>(shape: &[usize], fan_in: usize, seed: u64, tags: &[u64], zero: bool) -> Tensor<T> {
    if zero {
        return Tensor::zeros(shape);
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = SplitMix64::stream(seed, tags);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit((2.0 * rng.uniform() - 1.0) * bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

const TAG_G: u64 = 0x47;
const TAG_H: u64 = 0x48;
const TAG_D: u64 = 0x44;

pub fn init_g<T: Real>(cfg: &GConfig, seed: u64) -> Result<Params<T>> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut cin = cfg.in_channels;
    let last = cfg.layers.len() - 1;
    for (i, l) in cfg.layers.iter().enumerate() {
        let fan_in = cin * l.kernel * l.kernel;
        let zero = cfg.zero_init_final && i == last;
        names.push(format!("g.conv{i}.weight"));
        tensors.push(init_layer(&[l.out_channels, cin, l.kernel, l.kernel], fan_in, seed, &[TAG_G, i as u64], zero));
        names.push(format!("g.conv{i}.bias"));
        tensors.push(Tensor::zeros(&[l.out_channels]));
        cin = l.out_channels;
    }
    Ok(Params { names, tensors })
}

fn init_mlp<T: Real>(prefix: &str, tag: u64, cin: usize, widths: &[usize], zero_final: bool, seed: u64) -> Params<T> {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut fan_in = cin;
    for (i, &w) in widths.iter().enumerate() {
        let zero = zero_final && i + 1 == widths.len();
        names.push(format!("{prefix}.fc{i}.weight"));
        tensors.push(init_layer(&[w, fan_in], fan_in, seed, &[tag, i as u64], zero));
        names.push(format!("{prefix}.fc{i}.bias"));
        tensors.push(Tensor::zeros(&[w]));
        fan_in = w;
    }
    Params { names, tensors }
}

pub fn init_h<T: Real>(cfg: &HConfig, seed: u64) -> Result<Params<T>> {
    if cfg.k == 0 || cfg.hidden == 0 || cfg.in_channels == 0 {
        return Err(Error::invalid("H dimensions must be positive"));
    }
    Ok(init_mlp("h", TAG_H, cfg.in_channels, &[cfg.hidden, cfg.k], cfg.zero_init_final, seed))
}

pub fn init_d<T: Real>(cfg: &DConfig, seed: u64) -> Result<Params<T>> {
    cfg.validate()?;
    Ok(init_mlp("d", TAG_D, cfg.in_channels, &cfg.widths, cfg.zero_init_final, seed))
}

/// Image `1×H×W` → per-pixel class probabilities `C×H×W`.
pub fn g_forward<T: Real>(g: &mut Graph<T>, image: Var, params: &[Var], cfg: &GConfig) -> Result<Var> {
    if params.len() != 2 * cfg.layers.len() {
        return Err(Error::invalid("G parameter count does not match config"));
    }
    if !g.value(image).is_finite() {
        return Err(Error::NonFinite("G input"));
    }
    let mut x = image;
    let last = cfg.layers.len() - 1;
    for (i, l) in cfg.layers.iter().enumerate() {
        x = conv2d(g, x, params[2 * i], params[2 * i + 1], 1, l.padding)?;
        if i != last {
            x = activation(g, x, Activation::Relu)?;
        }
    }
    softmax_channel(g, x)
}

#[derive(Clone, Copy, Debug)]
pub struct HOutput {
    pub logits: Var,
    pub probs: Var,
}

/// Probabilities `C×H×W` → patch representation `K×U×V`.
pub fn h_forward<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    params: &[Var],
    cfg: &HConfig,
    grid: &PatchGrid,
) -> Result<HOutput> {
    if params.len() != 4 {
        return Err(Error::invalid("H needs four parameter tensors"));
    }
    let (_, h, w) = g.value(probs).dims3()?;
    if grid.rows * grid.patch_h != h || grid.cols * grid.patch_w != w {
        return Err(Error::shape("H requires the patch grid to tile the prediction exactly"));
    }
    // one pooling bin per grid cell
    let pooled = adaptive_avg_pool2d(g, probs, grid.rows, grid.cols)?;
    let hid = linear_per_location(g, pooled, params[0], params[1])?;
    let hid = activation(g, hid, Activation::LeakyRelu(cfg.slope))?;
    let logits = linear_per_location(g, hid, params[2], params[3])?;
    let probs = softmax_channel(g, logits)?;
    Ok(HOutput { logits, probs })
}

/// Patch representation `K×U×V` → source probability `1×U×V`.
pub fn d_forward<T: Real>(g: &mut Graph<T>, features: Var, params: &[Var], cfg: &DConfig) -> Result<Var> {
    if params.len() != 2 * cfg.widths.len() {
        return Err(Error::invalid("D parameter count does not match config"));
    }
    let (c, _, _) = g.value(features).dims3()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!("D expects {} channels, got {c}", cfg.in_channels)));
    }
    let mut x = features;
    for i in 0..cfg.widths.len() {
        x = linear_per_location(g, x, params[2 * i], params[2 * i + 1])?;
        let act = if i + 1 == cfg.widths.len() { Activation::Sigmoid } else { Activation::LeakyRelu(cfg.slope) };
        x = activation(g, x, act)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::new(vec![1, h, w], (0..h * w).map(|_| r.uniform()).collect()).unwrap()
    }

    fn random_cfg_g() -> GConfig {
        GConfig { zero_init_final: false, ..GConfig::desk(4) }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let cfg = random_cfg_g();
        let a: Params<f32> = init_g(&cfg, 5).unwrap();
        assert_eq!(a, init_g(&cfg, 5).unwrap());
        assert_ne!(a, init_g(&cfg, 6).unwrap());
        for (n, t) in a.names.iter().zip(&a.tensors) {
            if n.ends_with("bias") {
                assert!(t.data().iter().all(|&x| x == 0.0));
            }
        }
        // second conv: 32×16×3×3, fan_in 144
        let bound = (6.0f32 / 144.0).sqrt();
        assert_eq!(a.tensors[2].shape(), &[32, 16, 3, 3]);
        assert!(a.tensors[2].data().iter().all(|w| w.abs() <= bound));
        assert!(a.tensors[2].data().iter().any(|w| w.abs() > bound * 0.9));
    }

    #[test]
    fn g_zero_final_projection_is_uniform() {
        let cfg = GConfig::desk(4);
        let p: Params<f64> = init_g(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let x = g.constant(image(8, 6, 2));
        let o = g_forward(&mut g, x, &pv, &cfg).unwrap();
        assert_eq!(g.value(o).shape(), &[4, 8, 6]);
        assert!(g.value(o).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn g_output_is_probability_field() {
        let cfg = random_cfg_g();
        let p: Params<f32> = init_g(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let x = g.constant(image(10, 7, 4).cast());
        let o = g_forward(&mut g, x, &pv, &cfg).unwrap();
        let v = g.value(o);
        assert_eq!(v.shape(), &[4, 10, 7]);
        for s in 0..70 {
            let total: f32 = (0..4).map(|k| v.data()[k * 70 + s]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn h_forward_examples() {
        let grid = PatchGrid::new(8, 8, 4, 4).unwrap();
        let cfg = HConfig::desk(3, 5);
        let p: Params<f64> = init_h(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let o = g.constant(Tensor::full(&[3, 8, 8], 1.0 / 3.0));
        let out = h_forward(&mut g, o, &pv, &cfg, &grid).unwrap();
        assert_eq!(g.value(out.probs).shape(), &[5, 2, 2]);
        assert!(g.value(out.probs).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        // random weights, spatially constant O → F constant across sites
        let cfg = HConfig { zero_init_final: false, ..cfg };
        let p: Params<f64> = init_h(&cfg, 2).unwrap();
        let pv = p.bind(&mut g, false);
        let mut data = Vec::new();
        for k in 0..3 {
            data.extend(std::iter::repeat_n([0.2, 0.5, 0.3][k], 64));
        }
        let o = g.constant(Tensor::new(vec![3, 8, 8], data).unwrap());
        let out = h_forward(&mut g, o, &pv, &cfg, &grid).unwrap();
        let f = g.value(out.probs);
        for k in 0..5 {
            let row = &f.data()[k * 4..(k + 1) * 4];
            assert!(row.iter().all(|&v| (v - row[0]).abs() < 1e-15));
        }
        for s in 0..4 {
            let total: f64 = (0..5).map(|k| f.data()[k * 4 + s]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn d_forward_examples() {
        let cfg = DConfig { in_channels: 3, widths: vec![4, 5, 1], slope: 0.2, zero_init_final: false };
        let zero = Params {
            names: vec![],
            tensors: init_d::<f64>(&cfg, 1).unwrap().tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        };
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[3, 2, 2], 0.3));
        let pv = zero.bind(&mut g, false);
        let d = d_forward(&mut g, f, &pv, &cfg).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.5));

        let p: Params<f64> = init_d(&cfg, 7).unwrap();
        let pv = p.bind(&mut g, false);
        let mut r = SplitMix64::new(3);
        let fdata: Vec<f64> = (0..12).map(|_| r.uniform()).collect();
        let f = g.constant(Tensor::new(vec![3, 2, 2], fdata.clone()).unwrap());
        let d = d_forward(&mut g, f, &pv, &cfg).unwrap();
        let out = g.value(d).data().to_vec();
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));

        // permute sites (0,1,2,3) -> (3,1,0,2)
        let perm = [3, 1, 0, 2];
        let mut permuted = vec![0.0; 12];
        for k in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[k * 4 + dst] = fdata[k * 4 + src];
            }
        }
        let f = g.constant(Tensor::new(vec![3, 2, 2], permuted).unwrap());
        let d = d_forward(&mut g, f, &pv, &cfg).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(g.value(d).data()[dst], out[src]);
        }

        let wrong = g.constant(Tensor::full(&[2, 2, 2], 0.5));
        assert!(d_forward(&mut g, wrong, &pv, &cfg).is_err());
    }
}

//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use patchalign::diffcore::gradcheck::{check_gradients, LossFn};
use patchalign::diffcore::{
    activation, adaptive_avg_pool2d, conv2d, linear_per_location, softmax_channel, Activation, Graph, Tensor, Var,
};
use patchalign::losses::{
    disc_cluster_loss, discriminator_loss, entropy_loss, generator_adv_loss, seg_loss, soft_histogram, EntropyConfig,
};
use patchalign::nets::{d_forward, g_forward, h_forward, init_d, init_g, init_h, ConvSpec, DConfig, GConfig, HConfig};
use patchalign::patchmodes::{lloyd, ClusterMap, PatchGrid};
use patchalign::rng::SplitMix64;
use patchalign::synthdata::{LabelMap, IGNORE_LABEL};
use patchalign::Result;

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_INSTANCES: u64 = 20;

pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(rng, lo, hi)).collect()).unwrap()
}

/// Entries in `±[0.05, 1]`, keeping finite differences clear of activation kinks.
pub fn signed_away_from_zero(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = uniform(rng, 0.05, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn dim(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// Contracts a tensor-valued output with fixed random weights so every
/// output entry contributes a distinct amount to the scalar.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = SplitMix64::stream(seed, &[0xc0]);
    let w = g.constant(tensor(&mut rng, &shape, -1.0, 1.0));
    let z = g.mul(y, w)?;
    Ok(g.sum(z))
}

pub struct GradCase {
    pub name: &'static str,
    pub instances: u64,
    pub worst: f64,
    pub entries: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.instances >= GRAD_INSTANCES && self.worst < GRAD_TOL
    }
}

type Builder = fn(u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>);

fn run_case(name: &'static str, build: Builder) -> GradCase {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for i in 0..GRAD_INSTANCES {
        let (inputs, loss) = build(i);
        let r = check_gradients(&inputs, GRAD_STEP, &*loss).unwrap_or_else(|e| panic!("{name} instance {i}: {e}"));
        worst = worst.max(r.max_rel_err);
        entries += r.entries;
    }
    GradCase { name, instances: GRAD_INSTANCES, worst, entries }
}

fn case_conv(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[1]);
    let (ci, co, k) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, k.max(2), 4), dim(&mut r, k.max(2), 4));
    let stride = dim(&mut r, 1, 2);
    let pad = dim(&mut r, 0, k - 1);
    let x = tensor(&mut r, &[ci, h, w], -1.0, 1.0);
    let kern = tensor(&mut r, &[co, ci, k, k], -1.0, 1.0);
    let b = tensor(&mut r, &[co], -1.0, 1.0);
    (
        vec![x, kern, b],
        Box::new(move |g, v| {
            let y = conv2d(g, v[0], v[1], v[2], stride, pad)?;
            contract(g, y, i)
        }),
    )
}

fn case_pool(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[2]);
    let (c, h, w) = (dim(&mut r, 1, 3), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let (oh, ow) = (dim(&mut r, 1, h), dim(&mut r, 1, w));
    let x = tensor(&mut r, &[c, h, w], -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = adaptive_avg_pool2d(g, v[0], oh, ow)?;
            contract(g, y, i)
        }),
    )
}

fn case_softmax(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[3]);
    let shape = [dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let x = tensor(&mut r, &shape, -3.0, 3.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = softmax_channel(g, v[0])?;
            contract(g, y, i)
        }),
    )
}

fn activation_case(i: u64, kind: Activation, tag: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[tag]);
    let shape = [dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let x = if kind == Activation::Sigmoid {
        tensor(&mut r, &shape, -4.0, 4.0)
    } else {
        signed_away_from_zero(&mut r, &shape)
    };
    (
        vec![x],
        Box::new(move |g, v| {
            let y = activation(g, v[0], kind)?;
            contract(g, y, i)
        }),
    )
}

fn case_relu(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    activation_case(i, Activation::Relu, 4)
}

fn case_leaky(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    activation_case(i, Activation::LeakyRelu(0.2), 5)
}

fn case_sigmoid(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    activation_case(i, Activation::Sigmoid, 6)
}

fn case_linear(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[7]);
    let (ci, co, u, v) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let x = tensor(&mut r, &[ci, u, v], -1.0, 1.0);
    let w = tensor(&mut r, &[co, ci], -1.0, 1.0);
    let b = tensor(&mut r, &[co], -1.0, 1.0);
    (
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = linear_per_location(g, v[0], v[1], v[2])?;
            contract(g, y, i)
        }),
    )
}

fn case_elementwise(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[8]);
    let shape = [dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let a = tensor(&mut r, &shape, -1.0, 1.0);
    let b = tensor(&mut r, &shape, -1.0, 1.0);
    let s = uniform(&mut r, -2.0, 2.0);
    (
        vec![a, b],
        Box::new(move |g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.scale(v[0], s);
            let y = g.add(p, q)?;
            contract(g, y, i)
        }),
    )
}

fn random_labels(r: &mut SplitMix64, h: usize, w: usize, c: usize) -> LabelMap {
    let mut values: Vec<u8> = (0..h * w).map(|_| r.below(c as u64) as u8).collect();
    // keep at least one labeled pixel, drop some others
    for v in values.iter_mut().skip(1) {
        if r.uniform() < 0.2 {
            *v = IGNORE_LABEL;
        }
    }
    LabelMap::new(h, w, values).unwrap()
}

fn case_seg(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[9]);
    let (c, h, w) = (dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let o = tensor(&mut r, &[c, h, w], 0.05, 1.0);
    let y = random_labels(&mut r, h, w, c);
    (vec![o], Box::new(move |g, v| seg_loss(g, v[0], &y)))
}

fn case_cluster(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[10]);
    let (k, u, v) = (dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let f = tensor(&mut r, &[k, u, v], 0.05, 1.0);
    let ids = (0..u * v).map(|_| r.below(k as u64) as usize).collect();
    let valid = (0..u * v).map(|_| r.uniform() < 0.8).collect();
    let gamma = ClusterMap { rows: u, cols: v, ids, valid };
    (vec![f], Box::new(move |g, vars| disc_cluster_loss(g, vars[0], &gamma)))
}

fn case_disc(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[11]);
    let shape = [1, dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let ds = tensor(&mut r, &shape, 0.05, 0.95);
    let dt = tensor(&mut r, &shape, 0.05, 0.95);
    (vec![ds, dt], Box::new(|g, v| discriminator_loss(g, v[0], v[1])))
}

fn case_gen_adv(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[12]);
    let shape = [1, dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let dt = tensor(&mut r, &shape, 0.05, 0.95);
    (vec![dt], Box::new(|g, v| generator_adv_loss(g, v[0])))
}

fn case_entropy(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[13]);
    let shape = [dim(&mut r, 2, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
    let x = tensor(&mut r, &shape, -3.0, 3.0);
    let cfg = EntropyConfig { tau: uniform(&mut r, 0.5, 2.0) };
    (vec![x], Box::new(move |g, v| entropy_loss(g, v[0], &cfg)))
}

fn case_soft_hist_d(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[14]);
    let c = dim(&mut r, 2, 3);
    let (ph, pw) = (2 * dim(&mut r, 1, 2), 2 * dim(&mut r, 1, 2));
    let (rows, cols) = (dim(&mut r, 1, 2), dim(&mut r, 1, 2));
    let grid = PatchGrid::new(rows * ph, cols * pw, ph, pw).unwrap();
    let cfg = DConfig { in_channels: 4 * c, widths: vec![4, 3, 1], slope: 0.2, zero_init_final: false };
    let mut inputs = vec![
        tensor(&mut r, &[c, rows * ph, cols * pw], 0.0, 1.0),
        tensor(&mut r, &[c, rows * ph, cols * pw], 0.0, 1.0),
    ];
    inputs.extend(init_d::<f64>(&cfg, i).unwrap().tensors);
    (
        inputs,
        Box::new(move |g, v| {
            let fs = soft_histogram(g, v[0], &grid)?;
            let ft = soft_histogram(g, v[1], &grid)?;
            let ds = d_forward(g, fs, &v[2..], &cfg)?;
            let dt = d_forward(g, ft, &v[2..], &cfg)?;
            let l_disc = discriminator_loss(g, ds, dt)?;
            let adv = generator_adv_loss(g, dt)?;
            g.add(l_disc, adv)
        }),
    )
}

fn case_g_seg(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[15]);
    let c = dim(&mut r, 2, 3);
    let cfg = GConfig {
        in_channels: 1,
        layers: vec![
            ConvSpec { out_channels: 2, kernel: 3, padding: 1 },
            ConvSpec { out_channels: c, kernel: 1, padding: 0 },
        ],
        zero_init_final: false,
    };
    let (h, w) = (dim(&mut r, 2, 4), dim(&mut r, 2, 4));
    let mut inputs = init_g::<f64>(&cfg, i).unwrap().tensors;
    inputs.push(tensor(&mut r, &[1, h, w], 0.0, 1.0));
    let y = random_labels(&mut r, h, w, c);
    (
        inputs,
        Box::new(move |g, v| {
            let n = v.len() - 1;
            let o = g_forward(g, v[n], &v[..n], &cfg)?;
            seg_loss(g, o, &y)
        }),
    )
}

fn case_h_cluster(i: u64) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>) {
    let mut r = SplitMix64::stream(i, &[16]);
    let (c, k) = (dim(&mut r, 2, 3), dim(&mut r, 2, 4));
    let grid = PatchGrid::new(4, 4, 2, 2).unwrap();
    let cfg = HConfig { in_channels: c, hidden: 3, k, slope: 0.2, zero_init_final: false };
    let mut inputs = vec![tensor(&mut r, &[c, 4, 4], 0.0, 1.0)];
    inputs.extend(init_h::<f64>(&cfg, i).unwrap().tensors);
    let ids = (0..4).map(|_| r.below(k as u64) as usize).collect();
    let gamma = ClusterMap { rows: 2, cols: 2, ids, valid: vec![true; 4] };
    (
        inputs,
        Box::new(move |g, v| {
            let out = h_forward(g, v[0], &v[1..], &cfg, &grid)?;
            disc_cluster_loss(g, out.probs, &gamma)
        }),
    )
}

/// Every differentiable op and every loss, `GRAD_INSTANCES` random
/// instances each.
pub fn gradient_suite() -> Vec<GradCase> {
    let cases: [(&'static str, Builder); 17] = [
        ("conv2d", case_conv),
        ("adaptive_avg_pool2d", case_pool),
        ("softmax_channel", case_softmax),
        ("relu", case_relu),
        ("leaky_relu", case_leaky),
        ("sigmoid", case_sigmoid),
        ("linear_per_location", case_linear),
        ("add/mul/scale/sum", case_elementwise),
        ("seg_loss", case_seg),
        ("disc_cluster_loss", case_cluster),
        ("discriminator_loss", case_disc),
        ("generator_adv_loss", case_gen_adv),
        ("entropy_loss", case_entropy),
        ("soft_histogram + d_forward", case_soft_hist_d),
        ("g_forward + seg_loss", case_g_seg),
        ("h_forward + disc_cluster_loss", case_h_cluster),
        ("sigmoid (wide range)", |i| {
            let mut r = SplitMix64::stream(i, &[17]);
            let x = tensor(&mut r, &[1, 2, 2], -12.0, 12.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = activation(g, v[0], Activation::Sigmoid)?;
                    contract(g, y, i)
                }),
            )
        }),
    ];
    cases.into_iter().map(|(n, b)| run_case(n, b)).collect()
}

/// Sum of squared distances to cluster means for a 0/1 partition given by the
/// bits of `mask`.
fn partition_inertia(points: &[Vec<f64>], mask: u32) -> f64 {
    let d = points[0].len();
    let mut total = 0.0;
    for side in [0, 1] {
        let members: Vec<&Vec<f64>> =
            points.iter().enumerate().filter(|(i, _)| (mask >> i) & 1 == side).map(|(_, p)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for p in &members {
            for j in 0..d {
                mean[j] += p[j];
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        for p in &members {
            total += p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    total
}

/// Exhaustive optimum over all two-way partitions with both sides non-empty.
pub fn exhaustive_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    (1..(1u32 << (n - 1))).map(|mask| partition_inertia(points, mask)).fold(f64::INFINITY, f64::min)
}

/// Best Lloyd result over every ordered pair of distinct starting points.
pub fn multistart_two_means(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..points.len() {
            if i == j || points[i] == points[j] {
                continue;
            }
            let init = [points[i].clone(), points[j].clone()].concat();
            let fit = lloyd(points, init, 1000, 0.0).unwrap();
            best = best.min(fit.model.inertia);
        }
    }
    best
}

pub fn random_points(seed: u64, tag: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = SplitMix64::stream(seed, &[tag]);
    (0..n).map(|_| (0..d).map(|_| r.uniform()).collect()).collect()
}

/// Worst relative gap between multi-start Lloyd and the exhaustive optimum
/// over `instances` random problems with `n ≤ 8`, `d ≤ 3`, `K = 2`.
pub fn kmeans_optimum_gap(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..instances {
        let mut r = SplitMix64::stream(s, &[0x6f72]);
        let n = dim(&mut r, 3, 8);
        let d = dim(&mut r, 1, 3);
        let pts = random_points(s, 0x7074, n, d);
        let exact = exhaustive_two_means(&pts);
        let lloyd_best = multistart_two_means(&pts);
        worst = worst.max((lloyd_best - exact).abs() / exact.max(f64::MIN_POSITIVE));
    }
    worst
}

pub mod fixture {
    use patchalign::patchmodes::{kmeans_fit, sample_patches, ClusterModel, PatchGrid};
    use patchalign::synthdata::{generate_domain_pair, DomainPair, SceneConfig};
    use patchalign::trainer::{Mode, Session, TrainConfig};

    /// A 32×32, three-class problem small enough to train in milliseconds.
    pub struct Fixture {
        pub pair: DomainPair,
        pub model: ClusterModel,
        pub grid: PatchGrid,
        pub cfg: TrainConfig,
    }

    impl Fixture {
        pub fn new(mode: Mode) -> Self {
            let scene = SceneConfig {
                height: 32,
                width: 32,
                num_classes: 3,
                band_fractions: vec![0.25, 0.25, 0.5],
                ..SceneConfig::default()
            };
            let pair = generate_domain_pair(&scene, 6, 6, 3).unwrap();
            let grid = PatchGrid::new(32, 32, 8, 8).unwrap();
            let labels = pair.source_train.labels.as_ref().unwrap();
            let samples = sample_patches(labels, &grid, 200, 4, 3, 5).unwrap();
            let model = kmeans_fit(&samples, 4, 5, 50, 1e-9).unwrap();
            let cfg = TrainConfig {
                k: 4,
                warmup_iters: 3,
                max_iters: 12,
                lr_g: 5e-5,
                lambda_d: 0.5,
                lambda_adv: 0.05,
                lambda_en: 0.05,
                g_widths: vec![4, 4],
                h_hidden: 8,
                d_widths: vec![8, 1],
                eval_source_images: 3,
                seed: 11,
                mode,
                ..TrainConfig::default()
            };
            Self { pair, model, grid, cfg }
        }

        pub fn session(&self) -> Session<'_> {
            self.session_with(self.cfg.clone())
        }

        pub fn session_with(&self, cfg: TrainConfig) -> Session<'_> {
            Session::new(
                cfg,
                &self.pair.source_train,
                &self.pair.target_train,
                Some(&self.pair.target_test),
                &self.model,
                self.grid,
            )
            .unwrap()
        }
    }
}

pub mod anchors {
    use patchalign::diffcore::{Graph, Tensor};
    use patchalign::losses::{disc_cluster_loss, discriminator_loss, seg_loss};
    use patchalign::nets::{d_forward, g_forward, h_forward, init_d, init_g, init_h, DConfig, GConfig, HConfig};
    use patchalign::patchmodes::{ClusterMap, PatchGrid};
    use patchalign::rng::SplitMix64;
    use patchalign::synthdata::LabelMap;

    /// `(value, expected)` pairs.
    pub struct Anchor {
        pub value: f64,
        pub expected: f64,
    }

    impl Anchor {
        pub fn rel_err(&self) -> f64 {
            (self.value - self.expected).abs() / self.expected.abs()
        }

        pub fn abs_err(&self) -> f64 {
            (self.value - self.expected).abs()
        }
    }

    /// L_d of H's output with a zero-initialized final layer (uniform F).
    pub fn uniform_f_cluster_loss(seed: u64) -> Anchor {
        let mut r = SplitMix64::stream(seed, &[0xa1]);
        let (c, k) = (4, 16);
        let grid = PatchGrid::new(64, 64, 8, 8).unwrap();
        let cfg = HConfig::desk(c, k);
        let params = init_h::<f64>(&cfg, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = params.bind(&mut g, true);
        let probs: Vec<f64> = (0..c * 64 * 64).map(|_| r.uniform()).collect();
        let o = g.constant(Tensor::new(vec![c, 64, 64], probs).unwrap());
        let f = h_forward(&mut g, o, &pv, &cfg, &grid).unwrap().probs;
        let ids = (0..64).map(|_| r.below(k as u64) as usize).collect();
        let valid: Vec<bool> = (0..64).map(|_| r.uniform() < 0.75).collect();
        let n_valid = valid.iter().filter(|&&v| v).count();
        let gamma = ClusterMap { rows: 8, cols: 8, ids, valid };
        let l = disc_cluster_loss(&mut g, f, &gamma).unwrap();
        Anchor { value: g.value(l).item(), expected: n_valid as f64 * (k as f64).ln() }
    }

    /// L_D with a zero-initialized final D layer (D ≡ 0.5).
    pub fn zero_init_discriminator_loss(seed: u64) -> Anchor {
        let mut r = SplitMix64::stream(seed, &[0xa2]);
        let (k, u, v) = (16, 8, 8);
        let cfg = DConfig::desk(k);
        let params = init_d::<f64>(&cfg, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = params.bind(&mut g, true);
        let fs = g.constant(Tensor::new(vec![k, u, v], (0..k * u * v).map(|_| r.uniform()).collect()).unwrap());
        let ft = g.constant(Tensor::new(vec![k, u, v], (0..k * u * v).map(|_| r.uniform()).collect()).unwrap());
        let ds = d_forward(&mut g, fs, &pv, &cfg).unwrap();
        let dt = d_forward(&mut g, ft, &pv, &cfg).unwrap();
        let l = discriminator_loss(&mut g, ds, dt).unwrap();
        Anchor { value: g.value(l).item(), expected: 2.0 * (u * v) as f64 * 2f64.ln() }
    }

    /// L_s of G's output with a zero-initialized final layer (uniform O).
    pub fn uniform_o_seg_loss(seed: u64) -> Anchor {
        let mut r = SplitMix64::stream(seed, &[0xa3]);
        let (c, h, w) = (4, 64, 64);
        let cfg = GConfig::desk(c);
        let params = init_g::<f64>(&cfg, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = params.bind(&mut g, true);
        let img = g.constant(Tensor::new(vec![1, h, w], (0..h * w).map(|_| r.uniform()).collect()).unwrap());
        let o = g_forward(&mut g, img, &pv, &cfg).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.below(c as u64) as u8).collect()).unwrap();
        let l = seg_loss(&mut g, o, &labels).unwrap();
        Anchor { value: g.value(l).item(), expected: (h * w) as f64 * (c as f64).ln() }
    }
}

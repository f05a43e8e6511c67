//! Warm-up on the supervised loss, then alternating discriminator and
//! generator updates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::pten::Pten;
use crate::diffcore::{poly_decay_lr, Graph, OptimizerKind, OptimizerState, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{argmax_labels, iou_from_confusion, ConfusionMatrix};
use crate::losses::{
    disc_cluster_loss, discriminator_loss, entropy_loss, generator_adv_loss, seg_loss, soft_histogram,
    total_generator_loss, EntropyConfig, LossWeights,
};
use crate::nets::{
    d_forward, g_forward, h_forward, init_d, init_g, init_h, ConvSpec, DConfig, GConfig, HConfig, Params,
};
use crate::patchmodes::{cluster_map, ClusterMap, ClusterModel, PatchGrid};
use crate::rng::SplitMix64;
use crate::synthdata::{DomainDataset, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `L_s + λ_d L_d + λ_adv adv`
    Full,
    SourceOnly,
    /// `L_s + λ_d L_d`
    DOnly,
    /// `L_s + λ_d L_d + λ_en entropy(F_t)`; no discriminator.
    EntropyVariant,
    /// D on quadrant-averaged predictions; no H, no `L_d`.
    SoftHistogramVariant,
}

impl Mode {
    pub const ALL: [Mode; 5] =
        [Mode::Full, Mode::SourceOnly, Mode::DOnly, Mode::EntropyVariant, Mode::SoftHistogramVariant];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SourceOnly => "source_only",
            Mode::DOnly => "d_only",
            Mode::EntropyVariant => "entropy_variant",
            Mode::SoftHistogramVariant => "soft_histogram_variant",
        }
    }

    pub fn uses_cluster_loss(self) -> bool {
        matches!(self, Mode::Full | Mode::DOnly | Mode::EntropyVariant)
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Mode::Full | Mode::SoftHistogramVariant)
    }

    fn uses_h(self) -> bool {
        self.uses_cluster_loss()
    }

    fn uses_target(self) -> bool {
        matches!(self, Mode::Full | Mode::EntropyVariant | Mode::SoftHistogramVariant)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub lambda_d: f64,
    pub lambda_adv: f64,
    /// Weight of the entropy term in `entropy_variant`.
    pub lambda_en: f64,
    pub tau: f64,
    pub warmup_iters: u64,
    pub max_iters: u64,
    pub lr_g: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub power: f64,
    pub seed: u64,
    pub mode: Mode,
    /// 0 evaluates only at the end.
    pub eval_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Leading source-train images scored as the source validation split.
    pub eval_source_images: usize,
    pub g_widths: Vec<usize>,
    pub h_hidden: usize,
    pub d_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            k: 50,
            lambda_d: w.lambda_d,
            lambda_adv: w.lambda_adv,
            lambda_en: 0.0005,
            tau: EntropyConfig::default().tau,
            warmup_iters: 500,
            max_iters: 5000,
            lr_g: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_d: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            power: 0.9,
            seed: 0,
            mode: Mode::Full,
            eval_every: 0,
            checkpoint_every: 0,
            eval_source_images: 50,
            g_widths: vec![16, 32],
            h_hidden: 64,
            d_widths: vec![64, 128, 1],
        }
    }
}

impl TrainConfig {
    /// Errors name the offending key under the `train.` prefix.
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("train.{k}");
        if self.k < 2 {
            return Err(Error::config(key("k"), "must be at least 2"));
        }
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_adv", self.lambda_adv), ("lambda_en", self.lambda_en)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), format!("must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("tau", self.tau), ("power", self.power)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)]
        {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key(name), format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(key("weight_decay"), "must be >= 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::config(key("max_iters"), "must be positive"));
        }
        if self.warmup_iters > self.max_iters {
            return Err(Error::config(key("warmup_iters"), "must not exceed max_iters"));
        }
        if self.g_widths.is_empty() || self.g_widths.contains(&0) {
            return Err(Error::config(key("g_widths"), "needs at least one positive width"));
        }
        if self.h_hidden == 0 {
            return Err(Error::config(key("h_hidden"), "must be positive"));
        }
        if self.d_widths.last() != Some(&1) || self.d_widths.contains(&0) {
            return Err(Error::config(key("d_widths"), "widths must be positive and end in 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        match self.mode {
            Mode::EntropyVariant => LossWeights { lambda_d: self.lambda_d, lambda_adv: self.lambda_en },
            _ => LossWeights { lambda_d: self.lambda_d, lambda_adv: self.lambda_adv },
        }
    }
}

/// Network shapes implied by a config, class count and mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfigs {
    pub g: GConfig,
    pub h: HConfig,
    pub d: DConfig,
}

impl NetConfigs {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Self {
        let mut layers: Vec<ConvSpec> =
            cfg.g_widths.iter().map(|&w| ConvSpec { out_channels: w, kernel: 3, padding: 1 }).collect();
        layers.push(ConvSpec { out_channels: num_classes, kernel: 1, padding: 0 });
        let g = GConfig { in_channels: 1, layers, zero_init_final: true };
        let h = HConfig { hidden: cfg.h_hidden, ..HConfig::desk(num_classes, cfg.k) };
        let d_in = if cfg.mode == Mode::SoftHistogramVariant { 4 * num_classes } else { cfg.k };
        let d = DConfig { widths: cfg.d_widths.clone(), ..DConfig::desk(d_in) };
        Self { g, h, d }
    }

    pub fn num_classes(&self) -> usize {
        self.g.num_classes()
    }
}

/// Seeded shuffle over `0..n`, reshuffled each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub n: usize,
    pub seed: u64,
    pub tag: u64,
    pub epoch: u64,
    pub pos: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(n: usize, seed: u64, tag: u64) -> Self {
        let mut s = Self { n, seed, tag, epoch: 0, pos: 0, order: Vec::new() };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = SplitMix64::stream(self.seed, &[0x5341_4d50, self.tag, self.epoch]);
        self.order = (0..self.n).collect();
        for i in (1..self.n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            self.order.swap(i, j);
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.order.len() != self.n {
            self.shuffle();
        }
        if self.pos == self.n {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iter: u64,
    pub g: Params<f32>,
    pub h: Params<f32>,
    pub d: Params<f32>,
    pub opt_g: OptimizerState<f32>,
    pub opt_h: OptimizerState<f32>,
    pub opt_d: OptimizerState<f32>,
    pub source_sampler: Sampler,
    pub target_sampler: Sampler,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, nets: &NetConfigs, n_source: usize, n_target: usize) -> Result<Self> {
        let sgd = OptimizerKind::sgd(cfg.momentum, cfg.weight_decay);
        Ok(Self {
            iter: 0,
            g: init_g(&nets.g, cfg.seed)?,
            h: init_h(&nets.h, cfg.seed)?,
            d: init_d(&nets.d, cfg.seed)?,
            opt_g: OptimizerState::new(sgd),
            opt_h: OptimizerState::new(sgd),
            opt_d: OptimizerState::new(OptimizerKind::adam(cfg.adam_beta1, cfg.adam_beta2)),
            source_sampler: Sampler::new(n_source, cfg.seed, 0),
            target_sampler: Sampler::new(n_target, cfg.seed, 1),
        })
    }
}

/// One row of `log.csv`. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: u64,
    pub l_s: f64,
    pub l_d: Option<f64>,
    /// Adversarial term, or the entropy term in `entropy_variant`.
    pub gen_adv: Option<f64>,
    pub l_d_disc: Option<f64>,
    pub lr_g: f64,
    pub lr_d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: u64,
    pub split: String,
    pub ious: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn push(&mut self, r: IterRecord) -> Result<()> {
        if let Some(last) = self.iters.last() {
            if r.iter <= last.iter {
                return Err(Error::invalid(format!("iteration {} logged after {}", r.iter, last.iter)));
            }
        }
        let finite =
            [Some(r.l_s), r.l_d, r.gen_adv, r.l_d_disc, Some(r.lr_g), r.lr_d].into_iter().flatten().all(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("training losses"));
        }
        self.iters.push(r);
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("iter,l_s,l_d,gen_adv,l_d_disc,lr_g,lr_d\n");
        for r in &self.iters {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iter,
                r.l_s,
                opt_cell(r.l_d),
                opt_cell(r.gen_adv),
                opt_cell(r.l_d_disc),
                r.lr_g,
                opt_cell(r.lr_d)
            );
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        eval_csv(&self.evals)
    }

    pub fn last_eval(&self, split: &str) -> Option<&EvalRecord> {
        self.evals.iter().rev().find(|e| e.split == split)
    }
}

pub fn eval_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("iter,split,class_id,iou,miou\n");
    for e in records {
        for (c, iou) in e.ious.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c},{},{}", e.iter, e.split, opt_cell(*iou), e.miou);
        }
    }
    out
}

/// A labeled source image and its precomputed cluster map.
pub struct SourceBatch<'a> {
    pub image: &'a Tensor<f32>,
    pub labels: &'a LabelMap,
    pub gamma: Option<&'a ClusterMap>,
}

fn apply_update(
    opt: &mut OptimizerState<f32>,
    params: &mut Params<f32>,
    graph: &Graph<f32>,
    vars: &[Var],
    lr: f64,
) -> Result<()> {
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    let mut param_refs: Vec<&mut Tensor<f32>> = params.tensors.iter_mut().collect();
    opt.update(&mut param_refs, &grad_refs, lr)
}

fn lr_at(base: f64, iter: u64, cfg: &TrainConfig) -> Result<f64> {
    poly_decay_lr(base, iter, cfg.max_iters, cfg.power)
}

/// One SGD step on G minimizing `L_s`.
pub fn warmup_step(
    cfg: &TrainConfig,
    nets: &NetConfigs,
    st: &mut TrainState,
    batch: &SourceBatch<'_>,
) -> Result<IterRecord> {
    if st.iter >= cfg.warmup_iters {
        return Err(Error::invalid("warm-up step requested after warm-up finished"));
    }
    let lr_g = lr_at(cfg.lr_g, st.iter, cfg)?;
    let mut g = Graph::new();
    let gv = st.g.bind(&mut g, true);
    let img = g.constant(batch.image.clone());
    let o = g_forward(&mut g, img, &gv, &nets.g)?;
    let l_s = seg_loss(&mut g, o, batch.labels)?;
    g.backward(l_s)?;
    apply_update(&mut st.opt_g, &mut st.g, &g, &gv, lr_g)?;
    let rec = IterRecord {
        iter: st.iter,
        l_s: g.value(l_s).item() as f64,
        l_d: None,
        gen_adv: None,
        l_d_disc: None,
        lr_g,
        lr_d: None,
    };
    st.iter += 1;
    Ok(rec)
}

/// One adaptation iteration: a discriminator step on detached patch
/// representations, then a joint G,H step with D held fixed.
pub fn train_step(
    cfg: &TrainConfig,
    nets: &NetConfigs,
    grid: &PatchGrid,
    st: &mut TrainState,
    batch_s: &SourceBatch<'_>,
    image_t: &Tensor<f32>,
) -> Result<IterRecord> {
    if st.iter < cfg.warmup_iters {
        return Err(Error::invalid("adaptation step requested during warm-up"));
    }
    if st.iter >= cfg.max_iters {
        return Err(Error::invalid("iteration budget exhausted"));
    }
    let mode = cfg.mode;
    let lr_g = lr_at(cfg.lr_g, st.iter, cfg)?;
    let lr_d = lr_at(cfg.lr_d, st.iter, cfg)?;

    let mut g = Graph::new();
    let gv = st.g.bind(&mut g, true);
    let hv = if mode.uses_h() { st.h.bind(&mut g, true) } else { Vec::new() };
    let img_s = g.constant(batch_s.image.clone());
    let o_s = g_forward(&mut g, img_s, &gv, &nets.g)?;
    let l_s = seg_loss(&mut g, o_s, batch_s.labels)?;

    let mut l_d = None;
    let mut f_s_h = None;
    if mode.uses_cluster_loss() {
        let gamma = batch_s.gamma.ok_or_else(|| Error::invalid("source cluster map missing"))?;
        let f_s = h_forward(&mut g, o_s, &hv, &nets.h, grid)?.probs;
        l_d = Some(disc_cluster_loss(&mut g, f_s, gamma)?);
        f_s_h = Some(f_s);
    }

    let mut adv = None;
    let mut l_disc = None;
    if mode.uses_target() {
        let img_t = g.constant(image_t.clone());
        let o_t = g_forward(&mut g, img_t, &gv, &nets.g)?;
        match mode {
            Mode::EntropyVariant => {
                let logits = h_forward(&mut g, o_t, &hv, &nets.h, grid)?.logits;
                let ecfg = EntropyConfig { tau: cfg.tau };
                adv = Some(entropy_loss(&mut g, logits, &ecfg)?);
            }
            _ => {
                let (f_s, f_t) = if mode == Mode::SoftHistogramVariant {
                    (soft_histogram(&mut g, o_s, grid)?, soft_histogram(&mut g, o_t, grid)?)
                } else {
                    let fs = f_s_h.expect("full mode computes F_s");
                    (fs, h_forward(&mut g, o_t, &hv, &nets.h, grid)?.probs)
                };

                let mut gd = Graph::new();
                let dv = st.d.bind(&mut gd, true);
                let cs = gd.constant(g.value(f_s).clone());
                let ct = gd.constant(g.value(f_t).clone());
                let ds = d_forward(&mut gd, cs, &dv, &nets.d)?;
                let dt = d_forward(&mut gd, ct, &dv, &nets.d)?;
                let ld = discriminator_loss(&mut gd, ds, dt)?;
                gd.backward(ld)?;
                apply_update(&mut st.opt_d, &mut st.d, &gd, &dv, lr_d)?;
                l_disc = Some(gd.value(ld).item() as f64);

                let frozen = st.d.bind(&mut g, false);
                let d_t = d_forward(&mut g, f_t, &frozen, &nets.d)?;
                adv = Some(generator_adv_loss(&mut g, d_t)?);
            }
        }
    }

    let total = total_generator_loss(&mut g, l_s, l_d, adv, &cfg.weights())?;
    g.backward(total)?;
    apply_update(&mut st.opt_g, &mut st.g, &g, &gv, lr_g)?;
    if mode.uses_h() {
        apply_update(&mut st.opt_h, &mut st.h, &g, &hv, lr_g)?;
    }

    let val = |v: Var| g.value(v).item() as f64;
    let rec = IterRecord {
        iter: st.iter,
        l_s: val(l_s),
        l_d: l_d.map(val),
        gen_adv: adv.map(val),
        l_d_disc: l_disc,
        lr_g,
        lr_d: mode.uses_discriminator().then_some(lr_d),
    };
    st.iter += 1;
    Ok(rec)
}

/// Class probabilities for one image.
pub fn predict(g_params: &Params<f32>, cfg: &GConfig, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let gv = g_params.bind(&mut g, false);
    let img = g.constant(image.clone());
    let o = g_forward(&mut g, img, &gv, cfg)?;
    Ok(g.value(o).clone())
}

/// Confusion matrix of argmax predictions over the first `limit` images.
pub fn confusion_on(
    g_params: &Params<f32>,
    cfg: &GConfig,
    ds: &DomainDataset,
    limit: usize,
) -> Result<ConfusionMatrix> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::invalid("evaluation split has no labels"))?;
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    for (img, lbl) in ds.images.iter().zip(labels).take(limit) {
        let probs = predict(g_params, cfg, img)?;
        cm.add(lbl, &argmax_labels(&probs)?)?;
    }
    Ok(cm)
}

pub fn evaluate_split(
    g_params: &Params<f32>,
    cfg: &GConfig,
    ds: &DomainDataset,
    split: &str,
    limit: usize,
    iter: u64,
) -> Result<EvalRecord> {
    let cm = confusion_on(g_params, cfg, ds, limit)?;
    let (ious, miou) = iou_from_confusion(&cm);
    Ok(EvalRecord { iter, split: split.to_string(), ious, miou, pixel_accuracy: cm.pixel_accuracy() })
}

pub fn precompute_gammas(
    labels: &[LabelMap],
    grid: &PatchGrid,
    model: &ClusterModel,
    num_classes: usize,
) -> Result<Vec<ClusterMap>> {
    labels.iter().map(|l| cluster_map(l, grid, model, num_classes)).collect()
}

/// Datasets, patch grid and cached cluster maps for one run. Training state
/// is kept separately so it can be cloned and continued under another mode.
pub struct Session<'a> {
    pub cfg: TrainConfig,
    pub nets: NetConfigs,
    pub grid: PatchGrid,
    pub source: &'a DomainDataset,
    pub target: &'a DomainDataset,
    pub target_test: Option<&'a DomainDataset>,
    gammas: Vec<ClusterMap>,
}

pub const SPLIT_SOURCE_VAL: &str = "source_train";
pub const SPLIT_TARGET_TEST: &str = "target_test";

impl<'a> Session<'a> {
    pub fn new(
        cfg: TrainConfig,
        source: &'a DomainDataset,
        target: &'a DomainDataset,
        target_test: Option<&'a DomainDataset>,
        model: &ClusterModel,
        grid: PatchGrid,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.k != cfg.k {
            return Err(Error::invalid(format!("cluster model has K={}, config expects K={}", model.k, cfg.k)));
        }
        source.validate()?;
        target.validate()?;
        let c = source.num_classes;
        if target.num_classes != c || (target.height, target.width) != (source.height, source.width) {
            return Err(Error::invalid("source and target datasets disagree on classes or image size"));
        }
        if let Some(t) = target_test {
            t.validate()?;
            if t.num_classes != c || t.labels.is_none() {
                return Err(Error::invalid("target test split must be labeled with the same classes"));
            }
        }
        if model.dim != 4 * c {
            return Err(Error::invalid(format!("cluster model dimension {} does not match {c} classes", model.dim)));
        }
        if grid.rows * grid.patch_h != source.height || grid.cols * grid.patch_w != source.width {
            return Err(Error::invalid("patch grid must tile the images exactly"));
        }
        let labels = source.labels.as_ref().ok_or_else(|| Error::invalid("source dataset has no labels"))?;
        let gammas = precompute_gammas(labels, &grid, model, c)?;
        let nets = NetConfigs::new(&cfg, c);
        Ok(Self { cfg, nets, grid, source, target, target_test, gammas })
    }

    /// The same data under a different mode. D keeps its shape, so the soft
    /// histogram mode cannot be forked from the others.
    pub fn with_mode(&self, mode: Mode) -> Result<Session<'a>> {
        let cfg = TrainConfig { mode, ..self.cfg.clone() };
        let nets = NetConfigs::new(&cfg, self.nets.num_classes());
        if nets != self.nets {
            return Err(Error::invalid(format!("mode {} changes network shapes", mode.name())));
        }
        Ok(Session { cfg, nets, grid: self.grid, gammas: self.gammas.clone(), ..*self })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        TrainState::init(&self.cfg, &self.nets, self.source.len(), self.target.len())
    }

    pub fn gammas(&self) -> &[ClusterMap] {
        &self.gammas
    }

    /// Warm-up or adaptation step depending on the iteration count.
    pub fn step(&self, st: &mut TrainState) -> Result<IterRecord> {
        let si = st.source_sampler.next_index();
        let labels = self.source.labels.as_ref().expect("validated");
        let batch = SourceBatch { image: &self.source.images[si], labels: &labels[si], gamma: Some(&self.gammas[si]) };
        if st.iter < self.cfg.warmup_iters {
            warmup_step(&self.cfg, &self.nets, st, &batch)
        } else {
            let ti = st.target_sampler.next_index();
            train_step(&self.cfg, &self.nets, &self.grid, st, &batch, &self.target.images[ti])
        }
    }

    pub fn evaluate(&self, st: &TrainState) -> Result<Vec<EvalRecord>> {
        let mut out = vec![evaluate_split(
            &st.g,
            &self.nets.g,
            self.source,
            SPLIT_SOURCE_VAL,
            self.cfg.eval_source_images,
            st.iter,
        )?];
        if let Some(t) = self.target_test {
            out.push(evaluate_split(&st.g, &self.nets.g, t, SPLIT_TARGET_TEST, usize::MAX, st.iter)?);
        }
        Ok(out)
    }

    /// Steps until `st.iter == until`, evaluating and checkpointing on the
    /// configured cadence. The final iteration is always evaluated.
    pub fn run_until(
        &self,
        st: &mut TrainState,
        log: &mut TrainLog,
        until: u64,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        let until = until.min(self.cfg.max_iters);
        while st.iter < until {
            let rec = self.step(st)?;
            log.push(rec)?;
            let done = st.iter;
            if self.cfg.eval_every > 0 && done.is_multiple_of(self.cfg.eval_every) && done != self.cfg.max_iters {
                log.evals.extend(self.evaluate(st)?);
            }
            if let Some(dir) = ckpt_dir {
                if self.cfg.checkpoint_every > 0
                    && done.is_multiple_of(self.cfg.checkpoint_every)
                    && done != self.cfg.max_iters
                {
                    save_checkpoint(&dir.join(format!("iter_{done:06}")), st, self)?;
                }
            }
        }
        if st.iter == self.cfg.max_iters && log.evals.last().is_none_or(|e| e.iter != st.iter) {
            log.evals.extend(self.evaluate(st)?);
        }
        Ok(())
    }

    pub fn run(&self, ckpt_dir: Option<&Path>) -> Result<(TrainState, TrainLog)> {
        let mut st = self.init_state()?;
        let mut log = TrainLog::default();
        self.run_until(&mut st, &mut log, self.cfg.max_iters, ckpt_dir)?;
        if let Some(dir) = ckpt_dir {
            save_checkpoint(&dir.join("final"), &st, self)?;
        }
        Ok((st, log))
    }
}

/// Warm-up followed by alternation up to `max_iters`.
pub fn run_training(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    target_test: Option<&DomainDataset>,
    model: &ClusterModel,
    grid: PatchGrid,
) -> Result<(TrainState, TrainLog)> {
    Session::new(cfg.clone(), source, target, target_test, model, grid)?.run(None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    version: u32,
    iteration: u64,
    mode: Mode,
    num_classes: usize,
    grid: GridMeta,
    nets: NetConfigs,
    params: Vec<ParamEntry>,
    optimizers: Vec<OptimizerEntry>,
    source_sampler: Sampler,
    target_sampler: Sampler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridMeta {
    patch_h: usize,
    patch_w: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    net: String,
    kind: OptimizerKind,
    step: u64,
    /// `files[param][buffer]`
    files: Vec<Vec<String>>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub nets: NetConfigs,
    pub grid: PatchGrid,
    pub mode: Mode,
}

fn write_pten(dir: &Path, file: &str, t: &Tensor<f32>) -> Result<()> {
    Pten::from_tensor(t).write(&dir.join(file))
}

fn read_pten(dir: &Path, file: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let path = dir.join(file);
    let t = Pten::read(&path)?.into_tensor().map_err(|e| Error::parse(&path, e.to_string()))?;
    if t.shape() != shape {
        return Err(Error::parse(&path, format!("shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

/// One PTEN file per parameter and optimizer buffer plus `checkpoint.json`.
pub fn save_checkpoint(dir: &Path, st: &TrainState, session: &Session<'_>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for p in [&st.g, &st.h, &st.d] {
        for (name, t) in p.names.iter().zip(&p.tensors) {
            let file = format!("{name}.pten");
            write_pten(dir, &file, t)?;
            params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), file });
        }
    }
    let mut optimizers = Vec::new();
    for (net, opt) in [("g", &st.opt_g), ("h", &st.opt_h), ("d", &st.opt_d)] {
        let mut files = Vec::new();
        for (i, bufs) in opt.buffers.iter().enumerate() {
            let mut row = Vec::new();
            for (j, t) in bufs.iter().enumerate() {
                let file = format!("opt_{net}_{i}_{j}.pten");
                write_pten(dir, &file, t)?;
                row.push(file);
            }
            files.push(row);
        }
        optimizers.push(OptimizerEntry { net: net.into(), kind: opt.kind, step: opt.step, files });
    }
    let grid = &session.grid;
    let meta = CheckpointMeta {
        version: 1,
        iteration: st.iter,
        mode: session.cfg.mode,
        num_classes: session.nets.num_classes(),
        grid: GridMeta { patch_h: grid.patch_h, patch_w: grid.patch_w, rows: grid.rows, cols: grid.cols },
        nets: session.nets.clone(),
        params,
        optimizers,
        source_sampler: st.source_sampler.clone(),
        target_sampler: st.target_sampler.clone(),
    };
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&meta).expect("serializable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if meta.version != 1 {
        return Err(Error::parse(&path, format!("unsupported checkpoint version {}", meta.version)));
    }
    let mut by_net: [Params<f32>; 3] = Default::default();
    for e in &meta.params {
        let slot = match e.name.split('.').next() {
            Some("g") => 0,
            Some("h") => 1,
            Some("d") => 2,
            _ => return Err(Error::parse(&path, format!("unknown parameter `{}`", e.name))),
        };
        by_net[slot].names.push(e.name.clone());
        by_net[slot].tensors.push(read_pten(dir, &e.file, &e.shape)?);
    }
    let [g, h, d] = by_net;
    let mut opts = Vec::new();
    for (entry, params) in meta.optimizers.iter().zip([&g, &h, &d]) {
        if !entry.files.is_empty() && entry.files.len() != params.len() {
            return Err(Error::parse(&path, format!("optimizer `{}` has wrong buffer count", entry.net)));
        }
        let buffers = entry
            .files
            .iter()
            .zip(&params.tensors)
            .map(|(row, p)| row.iter().map(|f| read_pten(dir, f, p.shape())).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        opts.push(OptimizerState { kind: entry.kind, step: entry.step, buffers });
    }
    if opts.len() != 3 {
        return Err(Error::parse(&path, "expected three optimizer states"));
    }
    let opt_d = opts.pop().expect("len 3");
    let opt_h = opts.pop().expect("len 3");
    let opt_g = opts.pop().expect("len 3");
    let gm = &meta.grid;
    let grid = PatchGrid { patch_h: gm.patch_h, patch_w: gm.patch_w, rows: gm.rows, cols: gm.cols };
    let mut source_sampler = meta.source_sampler;
    let mut target_sampler = meta.target_sampler;
    source_sampler.shuffle();
    target_sampler.shuffle();
    Ok(Checkpoint {
        state: TrainState { iter: meta.iteration, g, h, d, opt_g, opt_h, opt_d, source_sampler, target_sampler },
        nets: meta.nets,
        grid,
        mode: meta.mode,
    })
}

impl Checkpoint {
    /// Patch representation of one image: H's output, or the quadrant
    /// histogram of the prediction for `soft_histogram_variant`.
    pub fn patch_features(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let gv = self.state.g.bind(&mut g, false);
        let img = g.constant(image.clone());
        let o = g_forward(&mut g, img, &gv, &self.nets.g)?;
        let f = if self.mode == Mode::SoftHistogramVariant {
            soft_histogram(&mut g, o, &self.grid)?
        } else {
            let hv = self.state.h.bind(&mut g, false);
            h_forward(&mut g, o, &hv, &self.nets.h, &self.grid)?.probs
        };
        Ok(g.value(f).clone())
    }
}

pub fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("log.csv", log.log_csv()), ("eval.csv", log.eval_csv())] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

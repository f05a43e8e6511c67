//! The desk-scale adaptation benchmark: several seeds of source_only,
//! d_only and full training forked from a shared warm-up, plus one
//! entropy_variant run.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::patchmodes::{kmeans_fit, sample_patches};
use crate::synthdata::{generate_domain_pair, DomainPair};
use crate::trainer::{Mode, Session, TrainConfig, TrainLog, SPLIT_SOURCE_VAL, SPLIT_TARGET_TEST};

/// The bundled benchmark configuration.
pub const BUNDLED_CONFIG: &str = include_str!("../configs/bench.json");

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Modes compared by the ordering gates.
pub const GATED_MODES: [Mode; 3] = [Mode::SourceOnly, Mode::DOnly, Mode::Full];

pub fn bundled_config() -> Result<RunConfig> {
    RunConfig::from_json(BUNDLED_CONFIG, std::path::Path::new("configs/bench.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: Mode,
    pub target_miou: f64,
    pub target_ious: Vec<Option<f64>>,
    pub source_miou: f64,
    /// Warm-up plus adaptation wall time.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub warmup_source_accuracy: f64,
    pub warmup_target_miou: f64,
    pub warmup_seconds: f64,
    pub modes: Vec<ModeResult>,
}

impl SeedResult {
    pub fn mode(&self, m: Mode) -> Option<&ModeResult> {
        self.modes.iter().find(|r| r.mode == m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seeds: Vec<SeedResult>,
    pub gates: Vec<Gate>,
    /// `(seed, entropy_variant mIoU, full mIoU)` when the entropy run was requested.
    pub entropy: Option<(u64, f64, f64)>,
    pub max_run_seconds: f64,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn gate(&self, prefix: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name.starts_with(prefix))
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed  warmup_src_acc  source_only  d_only      full        entropy");
        for s in &self.seeds {
            let cell = |m| s.mode(m).map_or("-".to_string(), |r| format!("{:.4}", r.target_miou));
            let _ = writeln!(
                out,
                "{:<4}  {:<14.4}  {:<11}  {:<10}  {:<10}  {}",
                s.seed,
                s.warmup_source_accuracy,
                cell(Mode::SourceOnly),
                cell(Mode::DOnly),
                cell(Mode::Full),
                cell(Mode::EntropyVariant)
            );
        }
        let med = |m| median(&self.seeds.iter().filter_map(|s| s.mode(m)).map(|r| r.target_miou).collect::<Vec<_>>());
        let _ = writeln!(
            out,
            "median                {:<11.4}  {:<10.4}  {:<10.4}",
            med(Mode::SourceOnly),
            med(Mode::DOnly),
            med(Mode::Full)
        );
        let _ = writeln!(out, "longest run: {:.1}s", self.max_run_seconds);
        for g in &self.gates {
            let _ = writeln!(out, "[{}] {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
        }
        out
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<DomainPair> {
    let d = &cfg.data;
    generate_domain_pair(&cfg.scene, d.n_source, d.n_target, d.n_target_test)
}

/// One seed: discover modes, warm up once, then continue each mode from a
/// copy of the warmed-up state.
pub fn run_seed(cfg: &RunConfig, data: &DomainPair, seed: u64, modes: &[Mode]) -> Result<SeedResult> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let labels = data.source_train.labels.as_ref().ok_or_else(|| Error::invalid("source train has no labels"))?;
    let m = &cfg.modes;
    let modes_seed = m.seed.wrapping_add(seed);
    let samples = sample_patches(labels, &grid, m.n_samples, m.k, cfg.scene.num_classes, modes_seed)?;
    let model = kmeans_fit(&samples, m.k, modes_seed, m.max_iter, m.tol)?;

    let train = TrainConfig { seed, mode: Mode::Full, eval_every: 0, checkpoint_every: 0, ..cfg.train.clone() };
    let base = Session::new(train, &data.source_train, &data.target_train, Some(&data.target_test), &model, grid)?;
    let start = Instant::now();
    let mut state = base.init_state()?;
    let mut log = TrainLog::default();
    base.run_until(&mut state, &mut log, base.cfg.warmup_iters, None)?;
    let warm = base.evaluate(&state)?;
    let warmup_seconds = start.elapsed().as_secs_f64();
    let pick = |evals: &[crate::trainer::EvalRecord], split: &str| {
        evals.iter().find(|e| e.split == split).cloned().ok_or_else(|| Error::invalid("missing evaluation split"))
    };
    let warm_src = pick(&warm, SPLIT_SOURCE_VAL)?;
    let warm_tgt = pick(&warm, SPLIT_TARGET_TEST)?;

    let mut results = Vec::with_capacity(modes.len());
    for &mode in modes {
        let session = base.with_mode(mode)?;
        let mut st = state.clone();
        let mut lg = log.clone();
        let t = Instant::now();
        session.run_until(&mut st, &mut lg, session.cfg.max_iters, None)?;
        let tgt = lg.last_eval(SPLIT_TARGET_TEST).cloned().ok_or_else(|| Error::invalid("no final evaluation"))?;
        let src = lg.last_eval(SPLIT_SOURCE_VAL).cloned().ok_or_else(|| Error::invalid("no final evaluation"))?;
        results.push(ModeResult {
            mode,
            target_miou: tgt.miou,
            target_ious: tgt.ious,
            source_miou: src.miou,
            seconds: warmup_seconds + t.elapsed().as_secs_f64(),
        });
    }
    Ok(SeedResult {
        seed,
        warmup_source_accuracy: warm_src.pixel_accuracy,
        warmup_target_miou: warm_tgt.miou,
        warmup_seconds,
        modes: results,
    })
}

/// Thread cap from `PATCHALIGN_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("PATCHALIGN_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Runs every seed (in up to `threads` parallel workers) and evaluates the
/// gates. The entropy run is attached to the first seed.
pub fn run_bench(cfg: &RunConfig, seeds: &[u64], threads: usize, with_entropy: bool) -> Result<BenchReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("bench needs at least one seed"));
    }
    let data = generate_data(cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedResult>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let mut modes = GATED_MODES.to_vec();
                if with_entropy && i == 0 {
                    modes.push(Mode::EntropyVariant);
                }
                let r = run_seed(cfg, &data, seeds[i], &modes);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let seeds: Vec<SeedResult> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<_>>()?;
    Ok(summarize(seeds))
}

pub fn summarize(seeds: Vec<SeedResult>) -> BenchReport {
    let n = seeds.len();
    let mut gates = Vec::new();

    let min_acc = seeds.iter().map(|s| s.warmup_source_accuracy).fold(f64::INFINITY, f64::min);
    gates.push(Gate {
        name: "(a) warm-up source pixel accuracy > 0.9".into(),
        passed: min_acc > 0.9,
        detail: format!("lowest over seeds {min_acc:.4}"),
    });

    let miou = |s: &SeedResult, m| s.mode(m).map_or(f64::NAN, |r| r.target_miou);
    let wins = seeds.iter().filter(|s| miou(s, Mode::Full) > miou(s, Mode::SourceOnly)).count();
    let needed = (4 * n).div_ceil(5);
    gates.push(Gate {
        name: format!("(b) full beats source_only on >= {needed} of {n} seeds"),
        passed: wins >= needed,
        detail: format!("{wins} of {n}"),
    });

    let med = |m| median(&seeds.iter().map(|s| miou(s, m)).collect::<Vec<_>>());
    let (so, d, f) = (med(Mode::SourceOnly), med(Mode::DOnly), med(Mode::Full));
    gates.push(Gate {
        name: "(c) median mIoU source_only <= d_only <= full".into(),
        passed: so <= d && d <= f,
        detail: format!("{so:.4} / {d:.4} / {f:.4} (margins {:+.4}, {:+.4})", d - so, f - d),
    });

    let entropy = seeds.iter().find_map(|s| {
        let e = s.mode(Mode::EntropyVariant)?;
        Some((s.seed, e.target_miou, miou(s, Mode::Full)))
    });
    let max_run_seconds = seeds.iter().flat_map(|s| s.modes.iter().map(|m| m.seconds)).fold(0.0, f64::max);
    BenchReport { seeds, gates, entropy, max_run_seconds }
}

//! `patchalign`: data generation, patch-mode discovery, training, evaluation,
//! feature export and the adaptation benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use patchalign::bench::{bundled_config, run_bench, threads_from_env, DEFAULT_SEEDS};
use patchalign::config::{parse_config, RunConfig};
use patchalign::eval::{export_features, FeatureMap};
use patchalign::patchmodes::{kmeans_fit_detailed, load_modes, sample_patches, save_modes, ModesMeta};
use patchalign::synthdata::{read_dataset, write_dataset, Domain, DomainDataset};
use patchalign::trainer::{eval_csv, evaluate_split, load_checkpoint, write_logs, Session};
use patchalign::Error;

#[derive(Parser)]
#[command(name = "patchalign", version, about = "Patch-level adversarial domain adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl SplitArg {
    fn dir(self) -> &'static str {
        match self {
            SplitArg::SourceTrain => "source_train",
            SplitArg::TargetTrain => "target_train",
            SplitArg::TargetTest => "target_test",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render source train, target train and target test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster source patch histograms into K modes.
    DiscoverModes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Warm-up and adversarial training; writes log.csv, eval.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        modes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one labeled split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "target-test")]
        split: SplitArg,
        /// Directory for eval.csv (defaults to the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write patch representations of a split to features.csv.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "target-test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Export at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the adaptation benchmark over several seeds and check its gates.
    Bench {
        /// Defaults to the bundled benchmark configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_entropy: bool,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            _ => 4,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => parse_config(p).map_err(|e| {
            let code = if matches!(e, Error::Io { .. }) { 3 } else { 2 };
            Failure { code, msg: e.to_string() }
        }),
    }
}

fn pick(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Failure { code: 2, msg: format!("no {name} path given on the command line or in paths.{name}") })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn gen_data(config: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(config.as_deref())?;
    let out = pick(out, &cfg.paths.data, "data")?;
    let pair = patchalign::bench::generate_data(&cfg)?;
    for (name, ds) in
        [("source_train", &pair.source_train), ("target_train", &pair.target_train), ("target_test", &pair.target_test)]
    {
        let dir = out.join(name);
        write_dataset(ds, &dir)?;
        if read_dataset(&dir)? != *ds {
            return Err(Failure { code: 4, msg: format!("{}: re-read dataset differs", dir.display()) });
        }
    }
    cfg.write_resolved(&out)?;
    println!(
        "wrote {} source, {} target train, {} target test images to {}",
        pair.source_train.len(),
        pair.target_train.len(),
        pair.target_test.len(),
        out.display()
    );
    Ok(())
}

fn read_source(data: &Path, cfg: &RunConfig) -> CliResult<DomainDataset> {
    let ds = read_dataset(&data.join("source_train"))?;
    if ds.num_classes != cfg.scene.num_classes || (ds.height, ds.width) != (cfg.scene.height, cfg.scene.width) {
        return Err(Failure { code: 4, msg: "source dataset does not match the scene config".into() });
    }
    Ok(ds)
}

fn discover_modes(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.modes.seed = s;
    }
    let data = pick(data, &cfg.paths.data, "data")?;
    let out = pick(out, &cfg.paths.modes, "modes")?;
    let source = read_source(&data, &cfg)?;
    let grid = cfg.grid()?;
    let m = &cfg.modes;
    let labels = source.labels.as_ref().ok_or_else(|| Failure { code: 4, msg: "source split has no labels".into() })?;
    let samples = sample_patches(labels, &grid, m.n_samples, m.k, cfg.scene.num_classes, m.seed)?;
    let fit = kmeans_fit_detailed(&samples, m.k, m.seed, m.max_iter, m.tol)?;
    let meta = ModesMeta {
        k: m.k,
        num_classes: cfg.scene.num_classes,
        patch_h: grid.patch_h,
        patch_w: grid.patch_w,
        seed: m.seed,
        inertia: fit.model.inertia,
        n_samples: m.n_samples,
    };
    save_modes(&fit.model, &meta, &out)?;
    let (reloaded, _) = load_modes(&out)?;
    if reloaded.k != fit.model.k {
        return Err(Failure { code: 4, msg: "re-read modes differ".into() });
    }
    cfg.write_resolved(&out)?;
    println!(
        "K={} modes from {} histograms, inertia {:.6} after {} iterations -> {}",
        m.k,
        m.n_samples,
        fit.model.inertia,
        fit.iterations,
        out.display()
    );
    Ok(())
}

fn train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    modes: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = pick(data, &cfg.paths.data, "data")?;
    let modes = pick(modes, &cfg.paths.modes, "modes")?;
    let out = pick(out, &cfg.paths.out, "out")?;
    let source = read_source(&data, &cfg)?;
    let target = read_dataset(&data.join("target_train"))?;
    let test = read_dataset(&data.join("target_test"))?;
    let (model, meta) = load_modes(&modes)?;
    if (meta.patch_h, meta.patch_w) != (cfg.patch.patch_h, cfg.patch.patch_w) {
        return Err(Failure { code: 4, msg: "modes were discovered with a different patch size".into() });
    }
    cfg.write_resolved(&out)?;
    let session = Session::new(cfg.train.clone(), &source, &target, Some(&test), &model, cfg.grid()?)?;
    let ckpt_dir = out.join("checkpoints");
    let (state, log) = session.run(Some(&ckpt_dir))?;
    write_logs(&out, &log)?;
    let saved = load_checkpoint(&ckpt_dir.join("final"))?;
    if saved.state.g != state.g {
        return Err(Failure { code: 4, msg: "final checkpoint does not re-read identically".into() });
    }
    for e in log.evals.iter().filter(|e| e.iter == state.iter) {
        println!("iter {} {}: mIoU {:.4}, pixel accuracy {:.4}", e.iter, e.split, e.miou, e.pixel_accuracy);
    }
    println!("wrote log.csv, eval.csv and checkpoints to {}", out.display());
    Ok(())
}

fn evaluate(checkpoint: PathBuf, data: PathBuf, split: SplitArg, out: Option<PathBuf>) -> CliResult {
    let ckpt = load_checkpoint(&checkpoint)?;
    let ds = read_dataset(&data.join(split.dir()))?;
    let rec = evaluate_split(&ckpt.state.g, &ckpt.nets.g, &ds, split.dir(), usize::MAX, ckpt.state.iter)?;
    let out = out.unwrap_or(checkpoint);
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_text(&out.join("eval.csv"), &eval_csv(std::slice::from_ref(&rec)))?;
    for (c, iou) in rec.ious.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    println!("mIoU {:.4}, pixel accuracy {:.4}", rec.miou, rec.pixel_accuracy);
    Ok(())
}

fn export(checkpoint: PathBuf, data: PathBuf, split: SplitArg, out: PathBuf, limit: Option<usize>) -> CliResult {
    let ckpt = load_checkpoint(&checkpoint)?;
    let ds = read_dataset(&data.join(split.dir()))?;
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let features = ds.images[..n].iter().map(|img| ckpt.patch_features(img)).collect::<patchalign::Result<Vec<_>>>()?;
    let domain = match ds.domain {
        Domain::Source => "source",
        Domain::Target => "target",
    };
    let maps: Vec<FeatureMap<'_>> =
        features.iter().enumerate().map(|(i, f)| FeatureMap { features: f, domain, id: i as u64 }).collect();
    let csv = export_features(&maps)?;
    let path = if out.extension().is_some() { out } else { out.join("features.csv") };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    write_text(&path, &csv)?;
    println!("wrote {} rows to {}", csv.lines().count() - 1, path.display());
    Ok(())
}

fn bench(config: Option<PathBuf>, seeds: Option<Vec<u64>>, out: Option<PathBuf>, no_entropy: bool) -> CliResult {
    let cfg = match config {
        Some(p) => load_config(Some(&p))?,
        None => bundled_config()?,
    };
    let seeds = seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let report = run_bench(&cfg, &seeds, threads_from_env(), !no_entropy)?;
    print!("{}", report.table());
    if let Some((seed, ent, full)) = report.entropy {
        println!("entropy_variant (seed {seed}): target mIoU {ent:.4} vs full {full:.4}");
    }
    if let Some(out) = out {
        cfg.write_resolved(&out)?;
        let json = serde_json::to_string_pretty(&report).expect("serializable");
        write_text(&out.join("bench.json"), &json)?;
        write_text(&out.join("bench.txt"), &report.table())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure { code: 4, msg: "benchmark gates failed".into() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => gen_data(config, out),
        Command::DiscoverModes { config, data, out, seed } => discover_modes(config, data, out, seed),
        Command::Train { config, data, modes, out, seed } => train(config, data, modes, out, seed),
        Command::Evaluate { checkpoint, data, split, out } => evaluate(checkpoint, data, split, out),
        Command::ExportFeatures { checkpoint, data, split, out, limit } => export(checkpoint, data, split, out, limit),
        Command::Bench { config, seeds, out, no_entropy } => bench(config, seeds, out, no_entropy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

//! `vqd`: generate synthetic data, train, evaluate, gradient-check and
//! compare attention diagnostics across runs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vqd_core::config::RunConfig;
use vqd_core::diagnostics::{read_run_csv, trend_table};
use vqd_core::gradsuite::{run_suite, SuiteOptions};
use vqd_core::model::Detector;
use vqd_core::numerics::ParameterStore;
use vqd_core::scenes::{ap40, ap40_for_class, generate_dataset, load_dataset, save_dataset};
use vqd_core::train::{detect_all, train, RunDir, TrainingMode};
use vqd_core::VqdError;

#[derive(Parser)]
#[command(name = "vqd", version, about = "Toy monocular 3D detector with variational query denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Scene settings (grid size, depth range, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write runs/<name>/{metrics.csv,config.txt,checkpoint.bin}.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "fld+vdn")]
        mode: String,
    },
    /// Print AP40 of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Offset added to analytic gradients (negative control).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Compare attention entropy and noisy-to-learnable mass across runs.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<VqdError> for Failure {
    fn from(e: VqdError) -> Self {
        match e {
            VqdError::Config(_) | VqdError::UnknownParameter(_) => Failure::Usage(e.to_string()),
            VqdError::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Validation scenes start far above any training seed so the two splits
/// never share a scene.
const VAL_SEED_OFFSET: u64 = 1 << 32;

fn gen_data(out: &Path, scenes: usize, seed: u64, split: Split, config: Option<&Path>, force: bool) -> CmdResult {
    if out.exists() && !force {
        return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let cfg = load_config(config)?;
    let first = match split {
        Split::Train => seed,
        Split::Val => seed.wrapping_add(VAL_SEED_OFFSET),
    };
    let data = generate_dataset(&cfg.scene, scenes, first);
    save_dataset(&data, out)?;
    println!("wrote {} scenes to {} (seed {seed})", data.len(), out.display());
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, val: &Path, run: &str, mode: &str) -> CmdResult {
    let mut cfg = load_config(config)?;
    let mode: TrainingMode = mode.parse()?;
    mode.apply(&mut cfg.train.detector);
    cfg.validate()?;
    let train_set = load_dataset(data)?;
    let val_set = load_dataset(val)?;
    let dir = RunDir::create(&cfg.runs_dir.join(run))?;
    println!("run {run}: mode {mode}, {} train / {} val scenes", train_set.len(), val_set.len());
    let text = cfg.to_text();
    let outcome = train(&cfg.train, &train_set, &val_set, Some((&dir, &text)), |r| {
        println!(
            "epoch {:>3}  det {:.4}  dn {:.4}  distill {:.4}  neg_entropy {:.4}  mass {:.4}  val_AP40 {:.4}",
            r.epoch, r.loss_det, r.loss_dn, r.loss_distill, r.neg_entropy, r.noisy_learnable_mass, r.val_ap40
        );
    })?;
    println!("best val AP40 {:.4} at epoch {}; checkpoint {}", outcome.best_ap, outcome.best_epoch, dir.checkpoint().display());
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, iou: f64, config: Option<&Path>) -> CmdResult {
    if !(iou > 0.0 && iou < 1.0) {
        return Err(Failure::Usage(format!("--iou must lie in (0, 1), got {iou}")));
    }
    if !checkpoint.exists() {
        return Err(Failure::Data(format!("checkpoint {} not found", checkpoint.display())));
    }
    let sibling = checkpoint.with_file_name("config.txt");
    let config = config.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    let cfg = load_config(config.as_deref())?;
    let (detector, mut store): (Detector, ParameterStore) = Detector::new(cfg.train.detector.clone(), cfg.train.seed)?;
    store.load_values(checkpoint)?;
    let scenes = load_dataset(data)?;
    let dets = detect_all(&detector, &store, &scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.ground_truth_boxes()).collect();
    for c in 0..cfg.train.detector.num_classes {
        match ap40_for_class(&dets, &gts, c, iou) {
            Some(ap) => println!("class {c}: AP40={ap:.6}"),
            None => println!("class {c}: no ground truth"),
        }
    }
    let ap = ap40(&dets, &gts, iou)?;
    println!("AP40={ap:.6}");
    Ok(())
}

fn grad_check(seed: u64, perturb: f64) -> CmdResult {
    let opts = SuiteOptions { seed, perturb, ..SuiteOptions::default() };
    let results = run_suite(&opts)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<30} instances {:>3}  max_rel_error {:.3e}  tol {:.0e}  {status}", r.name, r.instances, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn diagnose(runs: &[String], runs_dir: &Path) -> CmdResult {
    let mut loaded = Vec::with_capacity(runs.len());
    for name in runs {
        let path = runs_dir.join(name).join("metrics.csv");
        loaded.push((name.clone(), read_run_csv(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?));
    }
    print!("{}", trend_table(&loaded));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData { out, scenes, seed, split, config, force } => {
            gen_data(out, *scenes, *seed, *split, config.as_deref(), *force)
        }
        Command::Train { config, data, val, run, mode } => train_cmd(config.as_deref(), data, val, run, mode),
        Command::Eval { checkpoint, data, iou, config } => eval_cmd(checkpoint, data, *iou, config.as_deref()),
        Command::GradCheck { seed, perturb } => grad_check(*seed, *perturb),
        Command::Diagnose { runs, runs_dir } => diagnose(runs, runs_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}

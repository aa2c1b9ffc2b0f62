//! Command-line front end: dataset generation, model training, and the
//! attack/transfer/sweep/ablate/relevance experiment runners.
//!
//! Experiments read a flat `key = value` spec file; every flag below maps
//! onto the same key space and overrides the file value.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use polygrad::data::{generate_synthetic, Dataset};
use polygrad::experiments::{run_ablation_grid, run_relevance, run_sweep, run_transfer, ExperimentSpec};
use polygrad::models::{build, save_weights, train, TrainConfig};

#[derive(Parser)]
#[command(name = "polygrad", version, about = "Transfer-attack workbench with pluggable backward rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic 10-class image batches in the standard binary format
    GenData {
        /// Output directory for data_batch_*.bin / test_batch.bin
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 10_000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one architecture and save its weights
    Train {
        /// Architecture name from the registry
        #[arg(long)]
        arch: String,
        /// Directory holding the binary batches
        #[arg(long)]
        data: PathBuf,
        /// Weight file to write
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 0.9)]
        momentum: f32,
        #[arg(long, default_value_t = 5e-4)]
        weight_decay: f32,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable random crop / horizontal flip augmentation
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Attack eval images on the surrogate and report white-box success
    Attack(ExperimentArgs),
    /// Attack on the surrogate, evaluate transfer to every victim
    Transfer(ExperimentArgs),
    /// Run a parameter sweep (shared eval set across the grid)
    Sweep(ExperimentArgs),
    /// ReLU/max-pool modification grid: off/off, on/off, off/on, on/on
    Ablate(ExperimentArgs),
    /// Gradient-relevance summary per policy
    Relevance(ExperimentArgs),
}

/// Flags shared by every experiment subcommand; each one overrides the
/// matching spec-file key.
#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec file (flat key = value lines)
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    surrogate: Option<String>,
    #[arg(long)]
    surrogate_weights: Option<String>,
    /// Comma-separated arch:weights pairs
    #[arg(long)]
    victims: Option<String>,
    /// Comma-separated policy presets (vanilla, sgm, linbp, ghost, bpa, ...)
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// L∞ budget; fractions like 8/255 are accepted
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    relu_start: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    mask_prob: Option<String>,
    #[arg(long)]
    mask_layer: Option<String>,
    #[arg(long)]
    recover_prob: Option<String>,
    #[arg(long)]
    targeted: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    tim: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Eval-set size
    #[arg(long)]
    n: Option<String>,
    /// Sweep parameter name
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated sweep grid
    #[arg(long)]
    grid: Option<String>,
    /// Relevance step size
    #[arg(long)]
    step: Option<String>,
    #[arg(long)]
    n_images: Option<String>,
    /// CSV output path
    #[arg(long)]
    out: Option<String>,
}

impl ExperimentArgs {
    fn into_spec(self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::from_file(path)
                .with_context(|| format!("load-spec: {}", path.display()))?,
            None => ExperimentSpec::default(),
        };
        let overrides: [(&str, &Option<String>); 25] = [
            ("data_dir", &self.data_dir),
            ("surrogate", &self.surrogate),
            ("surrogate_weights", &self.surrogate_weights),
            ("victims", &self.victims),
            ("policy", &self.policy),
            ("method", &self.method),
            ("epsilon", &self.epsilon),
            ("alpha", &self.alpha),
            ("iters", &self.iters),
            ("mu", &self.mu),
            ("temperature", &self.temperature),
            ("relu_start", &self.relu_start),
            ("gamma", &self.gamma),
            ("lambda", &self.lambda),
            ("mask_prob", &self.mask_prob),
            ("mask_layer", &self.mask_layer),
            ("recover_prob", &self.recover_prob),
            ("targeted", &self.targeted),
            ("dim", &self.dim),
            ("tim", &self.tim),
            ("seed", &self.seed),
            ("n", &self.n),
            ("sweep_param", &self.param),
            ("sweep_grid", &self.grid),
            ("step", &self.step),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                spec.set(key, v).with_context(|| format!("flag --{}", key.replace('_', "-")))?;
            }
        }
        if let Some(v) = &self.n_images {
            spec.set("n_images", v).context("flag --n-images")?;
        }
        if let Some(v) = &self.out {
            spec.set("out", v).context("flag --out")?;
        }
        Ok(spec)
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { out, train, test, seed } => {
            generate_synthetic(&out, train, test, seed).context("gen-data")?;
            println!("wrote {train} train / {test} test records to {}", out.display());
        }
        Command::Train {
            arch,
            data,
            out,
            epochs,
            lr,
            momentum,
            weight_decay,
            batch_size,
            seed,
            no_augment,
            quiet,
        } => {
            let def = build(&arch).context("train: unknown architecture")?;
            let (train_split, test_split) = Dataset::load_dir(&data).context("train: load dataset")?;
            let cfg = TrainConfig {
                epochs,
                lr,
                momentum,
                weight_decay,
                batch_size,
                seed,
                augment: !no_augment,
                verbose: !quiet,
            };
            let store = train(&def, &train_split, &test_split, &cfg).context("train")?;
            save_weights(&store, &out).context("train: save weights")?;
            println!(
                "{arch}: clean test accuracy {:.2}%, weights at {}",
                100.0 * store.meta.clean_test_accuracy,
                out.display()
            );
        }
        Command::Attack(args) => {
            // surrogate-only white-box run unless victims are configured
            let spec = args.into_spec()?;
            let report = run_transfer(&spec).context("attack")?;
            print!("{}", report.to_csv());
            eprintln!("attack: {} images in {:.1?}", report.eval_count, report.wall_time);
        }
        Command::Transfer(args) => {
            let spec = args.into_spec()?;
            let report = run_transfer(&spec).context("transfer")?;
            print!("{}", report.to_csv());
            eprintln!("transfer: {} images in {:.1?}", report.eval_count, report.wall_time);
        }
        Command::Sweep(args) => {
            let spec = args.into_spec()?;
            let report = run_sweep(&spec).context("sweep")?;
            print!("{}", report.to_long_csv());
            eprintln!("sweep: {} images per point in {:.1?}", report.eval_count, report.wall_time);
        }
        Command::Ablate(args) => {
            let spec = args.into_spec()?;
            let report = run_ablation_grid(&spec).context("ablate")?;
            print!("{}", report.to_csv());
            eprintln!("ablate: {} images per cell in {:.1?}", report.eval_count, report.wall_time);
        }
        Command::Relevance(args) => {
            let spec = args.into_spec()?;
            let report = run_relevance(&spec).context("relevance")?;
            print!("{}", report.to_csv());
            eprintln!("relevance: {} images in {:.1?}", report.image_count, report.wall_time);
        }
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use noisy_nn::experiment::{self, Command, ExperimentConfig};

/// Noise-injection and distillation experiments on simulated analog hardware.
///
/// The dataset root is read from the config's `data_dir` or the
/// NOISY_NN_DATA environment variable.
#[derive(Parser)]
#[command(name = "noisy-nn", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean training of a freshly initialized network.
    Pretrain(RunArgs),
    /// Clip weights to ±2σ_W and finetune with the range frozen.
    ClipFinetune(RunArgs),
    /// Warm-started noisy retraining, optionally distilled from a teacher.
    Retrain(RunArgs),
    /// Accuracy over repeated noisy inference on a grid of η.
    EvalNoise(RunArgs),
    /// Bias–variance decomposition of the loss under weight noise.
    AnalyzeBv(RunArgs),
    /// Binned mutual information between inputs and noisy outputs.
    AnalyzeMi(RunArgs),
    /// Merge tables from run directories into plot-ready long format.
    Report {
        /// Run directories (searched recursively).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory for the merged tables.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noisy inference runs per grid point (eval-noise).
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated noise grid, e.g. 0.02,0.04,0.057.
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
}

fn load(cmd: Command, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(runs) = args.runs {
        if runs == 0 {
            bail!("--runs must be positive");
        }
        cfg.eval.runs = runs;
    }
    if let Some(grid) = &args.eta_grid {
        match cmd {
            Command::EvalNoise => cfg.eval.eta_grid = grid.clone(),
            Command::AnalyzeBv => cfg.bv.grid = grid.clone(),
            Command::AnalyzeMi => cfg.mi.eta_grid = grid.clone(),
            _ => bail!("--eta-grid applies to eval-noise, analyze-bv and analyze-mi"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::ClipFinetune(a) => (Command::ClipFinetune, a),
        Cmd::Retrain(a) => (Command::Retrain, a),
        Cmd::EvalNoise(a) => (Command::EvalNoise, a),
        Cmd::AnalyzeBv(a) => (Command::AnalyzeBv, a),
        Cmd::AnalyzeMi(a) => (Command::AnalyzeMi, a),
        Cmd::Report { inputs, out } => {
            let s = experiment::report(inputs, out)?;
            println!(
                "merged {} run directories: {} metrics, {} bv, {} mi rows; {} long-format rows in {}",
                s.sources,
                s.metrics,
                s.bv,
                s.mi,
                s.long,
                out.display()
            );
            return Ok(());
        }
    };
    let cfg = load(cmd, args)?;
    let s = experiment::run(cmd, cfg)?;
    println!("{} run {} in {}: {} rows computed", cmd.name(), s.run_id, s.dir.display(), s.computed);
    if let Some(c) = s.checkpoint {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

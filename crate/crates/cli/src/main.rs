mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use eba_core::inference::{Aggregation, LatentMode};

#[derive(Parser)]
#[command(name = "eba", version, about = "Energy-based test-sample adaptation at desk scale")]
struct Cli {
    /// Cap the worker thread pool (default: one thread per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic rotated-domain benchmark CSVs.
    Gen(GenArgs),
    /// Train a model bundle on generated source-domain CSVs.
    Train(TrainArgs),
    /// Adapt and classify target samples with a trained bundle.
    Eval(EvalArgs),
    /// Energy and accuracy against chain length, per latent mode.
    Sweep(SweepArgs),
    /// Export per-step adaptation traces for selected samples.
    Trace(TraceArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the CSVs and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed for the data draw (class geometry comes from the config).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the generated source CSVs.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, loss history, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a saved checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the config's per-domain batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the config's chain length.
    #[arg(long)]
    steps: Option<usize>,
    /// Train the plain contrastive loss without the latent variable.
    #[arg(long)]
    no_latent: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding the target CSVs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Adaptation steps; defaults to the checkpoint's training value.
    #[arg(long)]
    steps: Option<usize>,
    /// Monte Carlo chains per source domain.
    #[arg(long, default_value_t = 5)]
    draws: usize,
    #[arg(long, value_enum, default_value_t = LatentArg::Prior)]
    latent: LatentArg,
    #[arg(long, value_enum, default_value_t = AggArg::Ensemble)]
    aggregation: AggArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target angles to evaluate, e.g. `0,90`; default: every target file found.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<f64>>,
    /// Evaluate only the first N samples of each target set.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Chain lengths, e.g. `0,5,10,20,50`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 5, 10, 20, 50])]
    steps: Vec<usize>,
    /// Latent modes to sweep.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![LatentArg::Prior])]
    modes: Vec<LatentArg>,
    #[arg(long, default_value_t = 5)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<f64>>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(clap::Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sample indices within the target set, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    /// Target angle to read samples from; default: first target file found.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 2)]
    draws: usize,
    #[arg(long, value_enum, default_value_t = LatentArg::Prior)]
    latent: LatentArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LatentArg {
    None,
    Prior,
    Oracle,
}

impl From<LatentArg> for LatentMode {
    fn from(a: LatentArg) -> Self {
        match a {
            LatentArg::None => LatentMode::None,
            LatentArg::Prior => LatentMode::Prior,
            LatentArg::Oracle => LatentMode::Oracle,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Ensemble,
    ClosestCosine,
    WeightedCosine,
    MostConfident,
}

impl From<AggArg> for Aggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Ensemble => Aggregation::Ensemble,
            AggArg::ClosestCosine => Aggregation::ClosestCosine,
            AggArg::WeightedCosine => Aggregation::WeightedCosine,
            AggArg::MostConfident => Aggregation::MostConfident,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = eba_core::par::set_threads(n) {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    let result = match cli.command {
        Cmd::Gen(args) => commands::gen(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Sweep(args) => commands::sweep(args),
        Cmd::Trace(args) => commands::trace(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        let code = match e.downcast_ref::<eba_core::Error>() {
            Some(eba_core::Error::Config(_)) | Some(eba_core::Error::Usage(_)) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}

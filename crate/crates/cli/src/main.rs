mod commands;
mod config;
mod methods;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub const VERSION: &str = env!("STRUCTGP_GIT_DESCRIBE");

/// Structured Gaussian-process regression, classification and grid
/// denoising.
///
/// Data files are CSV with a header row (unless --no-header), numeric
/// cells with '.' as decimal separator, and the target in the last column
/// (see --target). Every flag may also be given in a key=value config file
/// passed with --config; flags on the command line win. The worker pool
/// size is taken from --threads, then the STRUCTGP_THREADS environment
/// variable, then the number of cores.
#[derive(Parser, Debug)]
#[command(name = "structgp", version = VERSION, about, long_about)]
struct Cli {
    /// Config file of `key = value` lines (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a regression model and write it as JSON.
    Train(commands::TrainArgs),
    /// Predict with a trained model; writes `mean,variance` rows and a
    /// metrics report.
    Predict(commands::PredictArgs),
    /// Train a classifier and predict class-1 probabilities for a test set.
    Classify(commands::ClassifyArgs),
    /// Time methods over a sweep of training-set sizes.
    Benchmark(commands::BenchmarkArgs),
    /// Reconstruct a grayscale image with a Kronecker-grid GP.
    Denoise(commands::DenoiseArgs),
    /// Write synthetic datasets.
    GenData(commands::GenDataArgs),
}

/// Data-file layout flags shared by several commands.
#[derive(Args, Debug, Clone)]
pub struct DataLayout {
    /// Target column: `last`, a 0-based index, or a header name.
    #[arg(long)]
    target: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = config::Config::load(cli.config.as_deref())?;
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("STRUCTGP_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|e| anyhow::anyhow!("STRUCTGP_THREADS: {e}"))?,
            ),
            Err(_) => cfg.get("threads")?,
        },
    };
    if let Some(t) = threads.filter(|t| *t > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a, &cfg),
        Command::Predict(a) => commands::predict(a, &cfg),
        Command::Classify(a) => commands::classify(a, &cfg),
        Command::Benchmark(a) => commands::benchmark(a, &cfg),
        Command::Denoise(a) => commands::denoise(a, &cfg),
        Command::GenData(a) => commands::gen_data(a, &cfg),
    }
}

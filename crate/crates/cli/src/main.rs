use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod bench;
mod commands;

/// Binarized networks with Elastic-Link shortcuts: train, evaluate, time,
/// count and verify.
#[derive(Parser, Debug)]
#[command(name = "elbnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by the model-building subcommands. The
/// shorthand flags are applied before `--set`, so `--set` wins.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file (`key = value` lines under [model], [train], [data]).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.002` or `--set el_s=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub arch: Option<String>,
    /// Ablation row: baseline, el1 .. el6.
    #[arg(long)]
    pub row: Option<String>,
    /// mnist_idx or cifar10_bin.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long = "data-dir")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long = "input-size")]
    pub input_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write metrics, checkpoints and the run manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forward latency, bit-packed kernels against the float path.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-layer operation counts and the link overhead.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every kernel against its reference implementation.
    Verify {
        /// Swap in a broken kernel to check that the suite notices.
        #[arg(long, hide = true)]
        mutate: Option<String>,
    },
    /// Link divisors and how far they moved from their initial values.
    GammaDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ELBNN_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("ELBNN_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Train { cfg, out } => commands::train(&cfg, &out),
        Command::Eval { cfg, checkpoint } => commands::eval(&cfg, &checkpoint),
        Command::Bench {
            cfg,
            runs,
            batch,
            checkpoint,
        } => bench::run(&cfg, runs, batch, checkpoint.as_deref()),
        Command::Flops { cfg } => commands::flops(&cfg),
        Command::Verify { mutate } => commands::verify(mutate.as_deref()),
        Command::GammaDump { cfg, checkpoint } => commands::gamma_dump(&cfg, checkpoint.as_deref()),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

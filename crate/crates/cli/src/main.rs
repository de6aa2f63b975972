use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snapdoa_cli::{commands, CliError, RunConfig};

/// Sparse-array DOA estimation and sensing-assisted beam management.
///
/// Exit codes: 0 success, 1 other failure, 2 config error,
/// 3 data/model mismatch, 4 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "snapdoa", version)]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true, env = "SNAPDOA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a SNAPDOA1 training dataset
    GenData {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        records: Option<usize>,
    },
    /// Train Snap-TF; writes a checkpoint and a per-epoch loss CSV
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of the configured schedule
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Monte Carlo MSE curves for baseline and/or checkpoint
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Beam-management throughput simulation
    BeamSim {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Print the header of a dataset or checkpoint file
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.threads).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let base = Path::new("");
    match cli.command {
        Command::GenData { output, records } => {
            let c = &mut cfg.gen_data;
            c.output = output.unwrap_or(c.output.clone());
            c.records = records.unwrap_or(c.records);
            commands::gen_data(c, seed)
        }
        Command::Train { dataset, checkpoint, curve, epochs, resume, stop_after } => {
            let c = &mut cfg.train;
            c.dataset = dataset.unwrap_or(c.dataset.clone());
            c.checkpoint = checkpoint.unwrap_or(c.checkpoint.clone());
            c.curve = curve.unwrap_or(c.curve.clone());
            c.epochs = epochs.unwrap_or(c.epochs);
            c.resume = resume.or(c.resume.take());
            commands::train_cmd(c, seed, stop_after)
        }
        Command::Eval { checkpoint, output, trials } => {
            let c = &mut cfg.eval;
            c.checkpoint = checkpoint.or(c.checkpoint.take());
            c.output = output.unwrap_or(c.output.clone());
            c.trials = trials.unwrap_or(c.trials);
            commands::eval_cmd(c, seed, base)
        }
        Command::BeamSim { output, trials } => {
            let c = &mut cfg.beam_sim;
            c.output = output.unwrap_or(c.output.clone());
            c.trials = trials.unwrap_or(c.trials);
            commands::beam_sim_cmd(c, seed, base)
        }
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("snapdoa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

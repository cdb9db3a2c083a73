mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "acl",
    version,
    about = "Affinity contrastive learning on synthetic skeleton data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing metrics, a checkpoint and eval embeddings.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one side of the training split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Dump confusion counts, neighbors, affinities and families.
    AffinityReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = acl_core::gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG plots from a training output directory.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `eval_embeddings.json` next to the metrics file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Defaults to `checkpoint/` next to the metrics file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => commands::train(&config, &data, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::eval(&checkpoint, &data, split),
        Command::AffinityReport { checkpoint, out } => commands::affinity_report(&checkpoint, &out),
        Command::GradCheck { trials, step, seed } => commands::grad_check(trials, step, seed),
        Command::Plot {
            metrics,
            out,
            embeddings,
            checkpoint,
        } => commands::plot(&metrics, &out, embeddings.as_deref(), checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdsa::cli;

#[derive(Parser)]
#[command(name = "sdsa", about = "Spatial-awareness experiments for knowledge-guided flux models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining and observed datasets.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the five-step protocol at one awareness level.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Awareness level: 1, 2, or 3 (or a strategy name).
        #[arg(long)]
        level: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate bundles on every region's held-out test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Bundle directory; repeat for several bundles.
        #[arg(long = "bundle", required = true)]
        bundles: Vec<PathBuf>,
        /// Output metrics.json path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plot-ready CSV and summary from a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match &args.command {
        Command::Gen { config, out, seed } => cli::cmd_gen(config, out, *seed),
        Command::Train {
            config,
            data,
            level,
            out,
        } => cli::cmd_train(config, data, level, out),
        Command::Eval {
            config,
            data,
            bundles,
            out,
        } => {
            let dirs: Vec<&std::path::Path> = bundles.iter().map(PathBuf::as_path).collect();
            cli::cmd_eval(config, data, &dirs, out)
        }
        Command::Report { metrics, out } => cli::cmd_report(metrics, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

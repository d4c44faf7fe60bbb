//! Thin command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use respqa::cli::{self, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "respqa", about = "Two-stage routed audio QA: corpus, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits from a spec (or the default).
    Generate {
        /// Corpus spec JSON; omit for the built-in default spec.
        #[arg(long)]
        corpus_spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with early stopping; writes checkpoint_best/, epoch_stats.csv,
    /// routing_log.jsonl under the config's out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the generated corpus.
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated tolerance grid for Acc@tau.
        #[arg(long)]
        taus: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate every fixed (expert x adapter) path plus the routed model.
    ForcedRoute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        taus: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Accuracy/macro-F1 over the three held-out shift splits.
    ShiftEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rebuild the routing heatmap from prediction + routing-log files.
    RouteReport {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        routing_log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { corpus_spec, out, seed } => {
            cli::cmd_generate(corpus_spec.as_deref(), &out, seed)?;
            println!("corpus written to {}", out.display());
        }
        Command::Train { config, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = cli::cmd_train(&cfg)?;
            println!(
                "best epoch {} ({} = {:.6}), {} epochs run; checkpoint in {}",
                outcome.best_epoch,
                outcome.primary,
                outcome.best_metric,
                outcome.epochs_run,
                cfg.out_dir.join("checkpoint_best").display()
            );
        }
        Command::Evaluate { checkpoint, corpus_dir, split, taus, out, workers } => {
            let taus = cli::parse_taus(taus.as_deref())?;
            cli::cmd_evaluate(&checkpoint, &corpus_dir, &split, &taus, &out, workers)?;
            println!("evaluation written to {}", out.display());
        }
        Command::ForcedRoute { checkpoint, corpus_dir, split, taus, out, workers } => {
            let taus = cli::parse_taus(taus.as_deref())?;
            cli::cmd_forced_route(&checkpoint, &corpus_dir, &split, &taus, &out, workers)?;
            println!("forced-route grid written to {}", out.display());
        }
        Command::ShiftEval { checkpoint, corpus_dir, out, workers } => {
            cli::cmd_shift_eval(&checkpoint, &corpus_dir, &out, workers)?;
            println!("shift report written to {}", out.display());
        }
        Command::RouteReport { predictions, routing_log, out } => {
            cli::cmd_route_report(&predictions, &routing_log, &out)?;
            println!("routing report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

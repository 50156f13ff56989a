//! `tas`: dataset synthesis, two-phase training, evaluation, alignment and inference.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tas_core::Error;

#[derive(Parser)]
#[command(name = "tas", version, about = "Temporal action segmentation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering: preset, then `--config` file, then `--set`, then `--seed`.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Hyperparameter preset: small, long or synthetic.
    #[arg(long, default_value = "synthetic")]
    pub preset: String,
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset tree.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root (default: data.root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both training phases and write checkpoints, history and the resolved config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (default: data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split, or score label files against ground truth.
    Eval(commands::EvalArgs),
    /// Viterbi-align a transcript to a probability file.
    Align {
        /// One row of class probabilities per frame.
        #[arg(long)]
        probs: PathBuf,
        /// Class names in order.
        #[arg(long)]
        transcript: PathBuf,
        /// Class map (`<id> <name>` per line).
        #[arg(long)]
        mapping: PathBuf,
        /// Frame-label output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one feature file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        /// Writes `<prefix>.probs.txt`, `<prefix>.transcript.txt` and `<prefix>.labels.txt`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 3,
        e if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth { config, out } => commands::synth(&config, out),
        Command::Train { config, data, out } => commands::train(&config, data, &out),
        Command::Eval(args) => commands::eval(&args),
        Command::Align {
            probs,
            transcript,
            mapping,
            out,
        } => commands::align(&probs, &transcript, &mapping, &out),
        Command::Infer {
            checkpoint,
            features,
            mapping,
            out_prefix,
        } => commands::infer(&checkpoint, &features, &mapping, &out_prefix),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

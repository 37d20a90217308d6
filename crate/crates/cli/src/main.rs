use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "conformer-r", version, about = "Train, decode and score Conformer-R speech recognizers")]
struct Cli {
    /// Run configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to continue training from
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose configuration differs
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute log-mel features for every utterance of a manifest
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate a synthetic tone corpus
    Synth {
        #[arg(long, default_value_t = 10)]
        n_utts: usize,
        #[arg(long, default_value_t = 5)]
        vocab_size: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long, default_value = "utt")]
        prefix: String,
    },
    /// Train a model
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a manifest with both decoding paths and report CER
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score a hypothesis file against references
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
}

fn configure_threads() {
    let Ok(v) = std::env::var("CONFORMER_R_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {}", e);
            }
        }
        _ => log::warn!("ignoring CONFORMER_R_THREADS={:?}: expected a positive integer", v),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

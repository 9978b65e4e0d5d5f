//! `webly`: generate, label, train on and evaluate webly-labeled multimodal
//! data.
//!
//! Exit status is 0 on success, 2 for argument or configuration errors, 3 for
//! missing or malformed data, and 4 for internal failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use webly_core::{Error, ErrorClass, Result};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "webly",
    version,
    about = "Self-paced co-training on webly-labeled multimodal data"
)]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with a held-out test split.
    Synth(Overrides),
    /// Infer pseudo labels by matching concept names against sample metadata.
    Label {
        #[arg(long)]
        dataset: PathBuf,
        /// One concept per line.
        #[arg(long)]
        concepts: PathBuf,
    },
    /// Train and write models, checkpoints and a metrics log.
    Train(Overrides),
    /// Evaluate a saved model on a dataset with ground truth.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Print a metrics record instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Compare co-training with the single-modality baseline across noise levels.
    SweepNoise(Overrides),
    /// Train once per voting-modality subset.
    Ablate(Overrides),
    /// List the top-ranked samples of one class.
    Retrieve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Class name or index.
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Run gradient, weight-rule, voting and metric self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(o) => commands::synth(&RunConfig::resolve(&o)?),
        Command::Label { dataset, concepts } => commands::label(&dataset, &concepts),
        Command::Train(o) => commands::train(&RunConfig::resolve(&o)?),
        Command::Eval { model, dataset, json } => commands::eval(&model, &dataset, json),
        Command::SweepNoise(o) => commands::sweep_noise(&RunConfig::resolve(&o)?),
        Command::Ablate(o) => commands::ablate(&RunConfig::resolve(&o)?),
        Command::Retrieve {
            model,
            dataset,
            class,
            k,
        } => commands::retrieve(&model, &dataset, &class, k),
        Command::Check { seed } => commands::check(seed),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Internal => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `flue`: pipeline stages from raw text to benchmark reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flue_core::Error;

#[derive(Parser, Debug)]
#[command(name = "flue", version, about = "French BERT-style pretraining and evaluation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// INI config file; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set adam.peak_lr=1e-4`. Applied after the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize, tokenize and filter raw text shards.
    Clean(commands::CleanArgs),
    /// Learn a BPE merge table and vocabulary from a cleaned corpus.
    LearnBpe(commands::LearnBpeArgs),
    /// Segment a cleaned corpus into sub-word symbols.
    ApplyBpe(commands::ApplyBpeArgs),
    /// Masked-language-model pretraining.
    Pretrain(commands::PretrainArgs),
    /// Fine-tune and score one classification task.
    Finetune(commands::TaskArgs),
    /// Run one word sense disambiguation task.
    Wsd(commands::TaskArgs),
    /// Run several tasks and seeds and write line-delimited JSON reports.
    Run(commands::RunArgs),
    /// Print a checkpoint header and tensor inventory.
    InspectCkpt(commands::InspectArgs),
    /// Write a synthetic raw corpus and benchmark task files.
    Synth(commands::SynthArgs),
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::InvalidConfig(_) => 1,
            e if e.is_numeric() => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::Clean(a) => commands::clean(g, a),
        Command::LearnBpe(a) => commands::learn_bpe(g, a),
        Command::ApplyBpe(a) => commands::apply_bpe(g, a),
        Command::Pretrain(a) => commands::pretrain(g, a),
        Command::Finetune(a) => commands::single_task(g, a, false),
        Command::Wsd(a) => commands::single_task(g, a, true),
        Command::Run(a) => commands::run(g, a),
        Command::InspectCkpt(a) => commands::inspect(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! `musim`: the pipeline entry point.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Disentangled music similarity: data, training, evaluation and retrieval.
#[derive(Debug, Parser)]
#[command(name = "musim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// RNG seed; overrides the config file's `seed` (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where the subcommand writes its artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Corpus inputs shared by the data-consuming subcommands.
#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// metadata.jsonl; relative audio paths resolve against its directory.
    #[arg(long)]
    pub metadata: PathBuf,
    /// Directory with genre.txt, mood.txt and instruments.txt (default: built-in).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus with known factors (--out DIR).
    Synth(commands::SynthArgs),
    /// Sample triplet sets, one JSONL file per condition (--out DIR).
    Sample(commands::SampleArgs),
    /// Train an encoder (--out DIR: checkpoint.bin, history.jsonl, state.bin).
    Train(commands::TrainArgs),
    /// Score a checkpoint on triplet sets (--out report.json).
    Evaluate(commands::EvaluateArgs),
    /// Fit and score the MFCC vector-quantization baseline (--out DIR).
    VqBaseline(commands::VqArgs),
    /// Embed a corpus into a retrieval index (--out index.bin).
    Index(commands::IndexArgs),
    /// Serve the JSON API and optional static UI (--out receives the bound address).
    Serve(commands::ServeArgs),
    /// Query a running server (--out results.json, default stdout).
    Query(commands::QueryArgs),
}

pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<musim_core::Error> for CliError {
    fn from(e: musim_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Sample(a) => commands::sample(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::VqBaseline(a) => commands::vq_baseline(a),
        Command::Index(a) => commands::index(a),
        Command::Serve(a) => commands::serve(a),
        Command::Query(a) => commands::query(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nRun with --help for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

//! `aolab`: train, evaluate, sample, bench, count, and probe any-order
//! language models from TOML run configs.
//!
//! Every command materializes a run directory under the output root
//! (`--out`, else `$AOLAB_OUT`, else `./runs`) containing the resolved
//! config, the declared artifacts, and a manifest written on success.
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 4 I/O error.

mod cmd_bench;
mod cmd_count;
mod cmd_eval;
mod cmd_probe;
mod cmd_sample;
mod cmd_train;
mod config;
mod runs;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aolab_core::CoreError;

#[derive(Parser)]
#[command(name = "aolab", version, about = "Any-order language model lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and log metrics plus checkpoints.
    Train(cmd_train::TrainArgs),
    /// Perplexity reports for a checkpoint on a text corpus.
    Eval(cmd_eval::EvalArgs),
    /// Generate text from a checkpoint.
    Sample(cmd_sample::SampleArgs),
    /// Time the generation engines across sequence lengths.
    Bench(cmd_bench::BenchArgs),
    /// Conditional-counting table with optional brute-force confirmation.
    Count(cmd_count::CountArgs),
    /// Any-order vs masked-diffusion objective equivalence probe.
    Probe(cmd_probe::ProbeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train::run(args),
        Command::Eval(args) => cmd_eval::run(args),
        Command::Sample(args) => cmd_sample::run(args),
        Command::Bench(args) => cmd_bench::run(args),
        Command::Count(args) => cmd_count::run(args),
        Command::Probe(args) => cmd_probe::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Exit-code contract: configuration problems (including unsupported
/// requests) are 2, numerical aborts 3, I/O and artifact corruption 4.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_)
                | CoreError::Unsupported(_)
                | CoreError::EnumerationBound { .. } => 2,
                CoreError::Numerical(_) => 3,
                CoreError::Io(_) | CoreError::Format(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    2
}

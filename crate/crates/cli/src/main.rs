//! `semindex`: learn hierarchical discrete semantic IDs for a document
//! corpus and retrieve documents by generating their IDs.
//!
//! Subcommands: `synth`, `train`, `assign`, `finetune`, `search`, `eval`.
//! Every command is deterministic given `--seed` and its inputs. Exit codes:
//! 0 success, 1 runtime failure, 2 usage or input validation failure.

mod commands;
mod config;
mod util;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "semindex", version, about = "Hierarchical semantic IDs and generative retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a planted category hierarchy.
    Synth(commands::SynthArgs),
    /// Learn semantic IDs for a corpus (progressive self-supervised training).
    Train(Box<commands::TrainArgs>),
    /// Assign IDs to (possibly unseen) documents with a trained checkpoint.
    Assign(commands::AssignArgs),
    /// Fine-tune a trained indexer on (query text -> document) pairs.
    Finetune(commands::FinetuneArgs),
    /// Constrained beam-search retrieval for a query file.
    Search(commands::SearchArgs),
    /// Compute evaluation metrics (IR metrics and/or ID-quality metrics).
    Eval(commands::EvalArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::run_synth(args),
        Command::Train(args) => commands::run_train(*args),
        Command::Assign(args) => commands::run_assign(args),
        Command::Finetune(args) => commands::run_finetune(args),
        Command::Search(args) => commands::run_search(args),
        Command::Eval(args) => commands::run_eval(args),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// Validation-shaped failures exit 2, everything else 1.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<semindex_core::Error>() {
            return match e {
                semindex_core::Error::Validation(_)
                | semindex_core::Error::Contract(_)
                | semindex_core::Error::Parse { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

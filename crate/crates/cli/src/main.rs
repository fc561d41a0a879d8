mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or malformed input. Exit code 1.
    Input(anyhow::Error),
    /// A shaped output broke one of its own invariants. Exit code 2.
    Invariant(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn main() -> ExitCode {
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
    let outcome = match cli.command {
        Command::Shape(a) => commands::shape(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Synth(a) => commands::synth(a),
        Command::TrainToy(a) => commands::train_toy(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant violated: {msg}");
            ExitCode::from(2)
        }
    }
}

//! `dualedit`: synthesise the toy world, pretrain the base model, train
//! and evaluate per-edit adapters, and run the modality analyses.

mod analyze;
mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(&cli, a),
        Command::Pretrain(a) => commands::pretrain(&cli, a),
        Command::EditTrain(a) => commands::edit_train(&cli, a),
        Command::Eval(a) => commands::eval(&cli, a),
        Command::Analyze(a) => analyze::run(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

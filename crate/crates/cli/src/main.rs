mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use refnet::training::Stage;

use crate::config::Values;
use crate::error::{exit, CliError};

fn dispatch(name: &str, v: &Values) -> Result<(), CliError> {
    match name {
        "train" => commands::run_training(v, Stage::Pretrain),
        "fit-anchors" => commands::run_training(v, Stage::FitAnchors),
        "finetune-m" => commands::run_training(v, Stage::FinetuneM),
        "train-b" => commands::run_training(v, Stage::TrainB),
        "translate" => commands::translate(v),
        "evaluate" => commands::evaluate(v),
        "gradcheck" => commands::gradcheck(v),
        "params" => commands::params(v),
        "synth" => commands::synth(v),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match config::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(exit::OK as u8),
                _ => ExitCode::from(exit::USAGE as u8),
            };
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return ExitCode::from(exit::USAGE as u8);
    };
    let result = Values::from_matches(sub).and_then(|v| dispatch(name, &v));
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `mlnet`: simulate, fit, select, evaluate and forecast dynamic multilayer networks.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use mlnet::Error;

use args::{resolve, Cli, Command};
use commands::Status;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io(_) | Error::Json(_) | Error::Parse(_) | Error::Shape(_) | Error::Domain(_) => {
            EXIT_IO
        }
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

fn run(cli: &Cli) -> Result<Status, Error> {
    let config = match &cli.config {
        Some(path) => Some(mlnet::io::read_json::<serde_json::Value>(path)?),
        None => None,
    };
    let cfg = config.as_ref();
    match &cli.command {
        Command::Simulate(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::simulate(&a, &v)
        }
        Command::Fit(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::fit_cmd(&a, &v)
        }
        Command::SelectDim(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::select_dim(&a, &v)
        }
        Command::Evaluate(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::evaluate(&a, &v)
        }
        Command::Predict(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::predict(&a, &v)
        }
        Command::Ingest(a) => {
            let (a, v) = resolve(a, cfg)?;
            commands::ingest(&a, &v)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: EM stopped at the iteration cap before converging");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input; exit code 2.
    Validation(String),
    /// A budget ran out before the result was complete; exit code 3.
    Budget(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::from_cli(cli)?;
    rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global().map_err(anyhow::Error::from)?;
    let report = commands::dispatch(&cfg)?;
    report.emit(cfg.format, &mut std::io::stdout().lock())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Budget(msg)) => {
            eprintln!("budget exceeded: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! `mrpo` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 I/O, 3 integrity,
//! 4 divergence abort, 5 verification failure.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Integrity(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    VerifyFailed(String),
    #[error(transparent)]
    Core(#[from] mrpo::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mrpo::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Integrity(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::VerifyFailed(_) => 5,
            CliError::Core(e) => match e {
                E::InvalidWeights(_)
                | E::InvalidConfig(_)
                | E::InvalidArgument(_)
                | E::NumericInput(_)
                | E::Encoding { .. }
                | E::TapeConsumed => 1,
                E::Parse { .. } | E::Io { .. } => 2,
                E::Integrity(_) | E::Format(_) => 3,
            },
        }
    }
}

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return report(e),
    };
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("mrpo: {e}");
    ExitCode::from(e.exit_code())
}

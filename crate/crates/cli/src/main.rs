//! `realsamp`: batch tooling around entropy-decay fitting and REAL decoding.
//!
//! Exit codes: 0 success, 2 usage (bad flags, missing files), 3 data error.

use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;

use args::Cli;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<realsamp_core::Error>() {
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

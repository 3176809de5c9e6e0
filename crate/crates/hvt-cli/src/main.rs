//! The `hvt` command line: decode and benchmark speculative tree
//! verification over synthetic
//! models.
//!
//! Subcommands: `gen-model`, `gen-corpus`, `decode`, `bench`, `dist-test`.
//! All randomness is governed by `--seed`; identical invocations produce
//! byte-identical stdout and report files.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation/config error,
//! 3 runtime failure.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    return ExitCode::SUCCESS;
                }
                _ => 1,
            };
            eprint!("{err}");
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 3,
            })
        }
    }
}

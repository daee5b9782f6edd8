use std::process::ExitCode;

use acn_cli::commands::{run, Cli};
use acn_cli::error_document;
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_document(&e));
            ExitCode::FAILURE
        }
    }
}

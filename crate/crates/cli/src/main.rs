use std::process::ExitCode;

use clap::Parser;
use matlora_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match matlora_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

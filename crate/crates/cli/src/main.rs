use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mvx_cli::Cli::parse();
    match mvx_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

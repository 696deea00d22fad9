use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = pronc::cli::Cli::parse();
    ExitCode::from(pronc::cli::execute(cli))
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    cleanloop_server::cli::run(cleanloop_server::cli::Cli::parse())
}

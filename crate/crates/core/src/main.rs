use std::process::ExitCode;

use clap::Parser;
use roundkv::harness::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}

use std::process::ExitCode;

use bknet_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bknet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

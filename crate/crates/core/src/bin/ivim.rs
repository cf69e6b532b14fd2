use std::process::ExitCode;

use clap::Parser;
use ivim_core::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = std::env::args().skip(1).collect();
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

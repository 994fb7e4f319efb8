use std::process::ExitCode;

use clap::Parser;
use milpool_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("milpool: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

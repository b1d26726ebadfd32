use std::process::ExitCode;

use clap::Parser;
use tc2_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("tc2: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

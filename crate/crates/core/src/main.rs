use std::process::ExitCode;

use clap::Parser;

use beamsync::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("beamsync: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

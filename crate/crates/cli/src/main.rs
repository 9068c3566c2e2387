use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = msgcrf_cli::Cli::parse();
    match msgcrf_cli::run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

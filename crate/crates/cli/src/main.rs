use std::process::ExitCode;

use clap::Parser;
use otfuse_cli::cli::Cli;
use otfuse_cli::{run, HarnessError, Outcome};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli).map_err(anyhow::Error::from) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure) => {
            eprintln!("error: some runs failed; see the status column");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

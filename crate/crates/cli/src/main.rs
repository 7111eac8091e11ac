use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use pdt_cli::args::Cli;
use pdt_cli::{commands, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli).and_then(|report| emit(&cli, &report)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit(cli: &Cli, report: &str) -> pdt_cli::Result<()> {
    match &cli.output {
        Some(path) => std::fs::write(path, report).map_err(|e| CliError::io(path, e)),
        None => {
            let mut out = std::io::stdout().lock();
            // a closed pipe is not worth a failure exit
            let _ = out.write_all(report.as_bytes());
            Ok(())
        }
    }
}

//! Thin command-line entry point; all logic lives in `sinkgate::runner`.

use clap::Parser;

use sinkgate::runner::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            println!(
                "{}: wrote {} artifact(s) under {}",
                manifest.command,
                manifest.artifacts.len(),
                manifest
                    .artifacts
                    .first()
                    .map(|a| a.split('/').next().unwrap_or(a))
                    .unwrap_or("."),
            );
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

//! `seqrec`: command-line driver for the benchmark pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training
//! divergence.

mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    // `search --jobs` builds its own pool; everything else runs on one thread.
    if !matches!(cli.command, Command::Search(_)) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match commands::dispatch(&cli.command, &argv) {
        Ok(result) => {
            println!("{}", result.summary);
            for p in &result.artifacts {
                println!("  wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

mod args;
mod commands;
mod failure;
mod rundir;

use std::process::ExitCode;

use clap::Parser;
use signtok_core::memory::TrackingAllocator;

// Lets `bench-memory` report measured peaks next to the analytic counts.
#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! `gim`: generate toy models and datasets, then run attribution,
//! self-repair and faithfulness pipelines over them. Every command writes
//! its results plus a `manifest.json` into `--out`.

mod cli;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = cli::Cli::parse();
    if args.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build_global()
        {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

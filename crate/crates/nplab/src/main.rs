// SPDX-License-Identifier: Apache-2.0

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use nplab::cli::Cli;
use nplab::cmd::{dispatch, Ctx};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let ctx = Ctx::new(cli.global.clone());
    match dispatch(cli.cmd, &ctx) {
        Ok(verdict) => {
            println!("{verdict}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nplab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

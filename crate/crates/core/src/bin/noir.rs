use std::process::ExitCode;

use clap::Parser;
use noir_core::cli::{execute, Cli, Outcome};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::try_parse() {
        Ok(cli) => execute(cli).into(),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Outcome::InputError.into()
            } else {
                Outcome::Clean.into()
            }
        }
    }
}

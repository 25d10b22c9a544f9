//! `semlogue` — train, generate, and evaluate desk-scale dialogue models.

mod commands;
mod common;

use clap::Parser;
use commands::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version "errors" are successes
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(common::EXIT_USAGE);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    match commands::run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(common::exit_code(&err));
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use harmonize::{run, Cli, OUT_ENV};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    match run(&cli, env_out) {
        Ok(outcome) => {
            println!("{outcome}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

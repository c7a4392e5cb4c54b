use std::process::ExitCode;

use clap::Parser;
use kbmem_cli::args::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match kbmem_cli::run(Cli::parse()) {
        Ok(m) => {
            log::info!("{}: wrote {} files", m.command, m.outputs.len() + 1);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use sta_unet::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command).to_lowercase();
    match run(&cli).with_context(|| format!("sta-lab {command} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // exit codes come from the library error at the root of the chain
            let code = err.downcast_ref::<sta_unet::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

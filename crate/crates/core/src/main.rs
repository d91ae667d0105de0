use std::process::ExitCode;

use clap::Parser;
use dualscreen::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {e:#}");
            // Library errors carry their own category; anything else is a data problem.
            let code = e.downcast_ref::<dualscreen::Error>().map_or(3, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    run(cli)?;
    Ok(())
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ddnpc::Cli::parse();
    match ddnpc::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

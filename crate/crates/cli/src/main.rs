use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use sacd_cli::commands::init_threads;
use sacd_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let status = init_threads().and_then(|()| run(&cli, &mut out));
    let _ = out.flush();
    match status {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

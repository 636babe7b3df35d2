use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use stfm_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let code = match run(cli, &mut stdout) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

mod commands;

use std::process::ExitCode;

use clap::Parser;
use densefew::Error;

use commands::Cli;

/// 1: usage, 2: data or format, 3: numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Unsupported(_) | Error::Config(_) => 1,
        Error::Numeric(_) | Error::Domain(_) => 3,
        Error::Shape { .. } | Error::Index(_) | Error::Format { .. } | Error::State(_) | Error::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("densefew: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

mod args;
mod commands;
mod config;
mod inputs;

use std::process::ExitCode;

use clap::Parser;

use cag_core::backends::BackendError;
use cag_core::curation::CurationError;

/// Input or usage problem.
const EXIT_INVALID: u8 = 2;
/// An external service failed.
const EXIT_BACKEND: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    let backend = err.chain().any(|cause| {
        cause.is::<BackendError>()
            || cause
                .downcast_ref::<CurationError>()
                .is_some_and(CurationError::is_backend)
            || cause
                .downcast_ref::<cag_core::Error>()
                .is_some_and(cag_core::Error::is_backend)
    });
    if backend {
        EXIT_BACKEND
    } else {
        EXIT_INVALID
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = args::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! `tassel`: attentive weakly supervised classification of object-based
//! satellite image time series, end to end from the command line.
//!
//! Subcommands: `synth` (generate labeled synthetic data), `cluster`
//! (extract and cache per-object components), `train`, `eval` (single model
//! or multi-seed protocol), `predict`, `explain` (attention maps), and
//! `sweep-nc` (sensitivity over the number of components).
//!
//! Exit codes: 1 usage/configuration, 2 data or schema problems, 3 numeric
//! failures.

mod commands;
mod manifest;
mod pipeline;

use clap::Parser;
use tassel_core::Error as CoreError;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    if let Ok(threads) = std::env::var("TASSEL_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => {
                eprintln!("error: TASSEL_THREADS must be a positive integer");
                std::process::exit(1);
            }
        }
    }

    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems (including unknown subcommands) exit 1; help
            // and version requests are not errors.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    match commands::run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Config(_) | CoreError::Contract(_) => 1,
                CoreError::Parse { .. } | CoreError::Schema(_) | CoreError::Io(_) => 2,
                CoreError::Json(_) => 2,
                CoreError::Shape(_) | CoreError::Numeric(_) | CoreError::Internal(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    3
}

//! Experiment driver for flexipatch: dataset generation, training,
//! evaluation, rollouts, spectral diagnosis, ablations and run comparison.
//!
//! Every verb writes `manifest.json` into its output directory before any
//! other file and flips `complete` to true only once all outputs exist.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;

pub use commands::{run_verb, Verb};
pub use config::{ConfigError, RunConfig};
pub use manifest::Manifest;

pub const THREADS_ENV: &str = "FLEXIPATCH_THREADS";

/// Size the global thread pool from `FLEXIPATCH_THREADS` when set.
pub fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{} must be a positive integer, got `{}`", THREADS_ENV, raw)))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(format!("{}: {}", THREADS_ENV, e)))
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const IO: i32 = 4;
}

/// Exit status for an error, from the first recognised cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use flexipatch::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) => exit::NUMERICAL,
                E::Io(_) | E::Format(_) | E::Json(_) => exit::IO,
                E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::UnknownParameter(_) => exit::CONFIG,
                E::NotDifferentiable { .. } => exit::FAILURE,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

//! File formats, pipeline commands and thread control for the `scenecap`
//! command-line tool. The numerical engine lives in `scenecap-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod model_io;

pub use commands::{cmd_eval, cmd_export, cmd_fit, cmd_synth, RunManifest};
pub use error::{CliError, Result};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "SCENECAP_THREADS";

/// Worker count from the flag, else the environment, else all cores.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return if n == 0 { Err(CliError::usage("--threads must be at least 1")) } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` on a pool capped at `threads` workers (default pool when
/// `None`). Results do not depend on the worker count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

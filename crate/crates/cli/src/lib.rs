//! Command-line front end: configuration, dataset and model files,
//! training, evaluation and single-scene estimation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod npk;
pub mod sweep;
pub mod train;

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "POSEKIT_THREADS";

/// Worker count from the flag, then the environment; 0 lets rayon decide.
pub fn thread_count(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV}={v:?} is not a thread count")),
        Err(_) => Ok(0),
    }
}

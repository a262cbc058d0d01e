//! Experiment plumbing: configuration, checkpoints, CSV output, and the
//! training, sweep and verification runs behind the command line.

mod checkpoint;
mod config;
mod metrics;
mod runs;
mod suites;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{NetBlock, PdeBlock, RunConfig, SdzeBlock};
pub use metrics::{header_line, MetricsWriter, TrainRow};
pub use runs::{
    checkpoint_path, robustness, run_ablate_crns, run_sweep_batch, run_sweep_rank_freq, run_train, run_verify, BatchRow,
    GridRow, Robustness, TrainSummary, CONFIG_ECHO, FINAL_CHECKPOINT, METRICS_FILE,
};
pub use suites::{
    benchmark_config, benchmark_params, crns_suite, memory_suite, run_suite, tiny_table, MemoryRow, Suite, CRNS_EPS,
    CRNS_REPLICATES, MEMORY_DIMS,
};

use crate::error::{Result, SdzeError};

/// Worker count: `SDZE_THREADS` if set, else all available cores.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("SDZE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(SdzeError::Config(format!("SDZE_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn worker_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads()?)
        .build()
        .map_err(|e| SdzeError::Config(format!("cannot start worker pool: {e}")))
}

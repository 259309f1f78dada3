//! Experiment harness around `diffbench-core`: configuration, the logistic
//! posterior benchmark, Gaussian order studies, CSV/SVG output and the
//! self-test suite.

pub mod config;
pub mod experiments;
pub mod output;
pub mod self_test;

pub use config::{parse_config, parse_config_str, Experiment, ExperimentConfig, Overrides};
pub use experiments::{
    run_experiment, run_figure1, run_order_study, score_error_scaling, ScalingResult,
};
pub use output::{emit_outputs, read_results, Diagnostic, ResultRow, RunOutput, SlopeRow};

/// Worker count from `DIFFBENCH_THREADS` (unset, empty or 0 means automatic).
pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var("DIFFBENCH_THREADS") {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map_err(|_| {
            anyhow::anyhow!("DIFFBENCH_THREADS must be a non-negative integer, got {v:?}")
        }),
        _ => Ok(0),
    }
}

/// Sizes the global rayon pool. Zero keeps rayon's default.
pub fn configure_threads(n: usize) -> anyhow::Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("configuring {n} worker threads: {e}"))?;
    }
    Ok(())
}

//! Experiment orchestration for the pgfed engine: JSON configs, single runs,
//! seed sweeps and the explicit-versus-implicit personalization study.

pub mod config;
pub mod fig2;
pub mod manifest;
pub mod runner;

pub use config::{parse_config, ExperimentConfig};
pub use fig2::{run_fig2_study, Fig2Report};
pub use manifest::RunManifest;
pub use runner::{run_experiment, run_sweep, RunSummary, SweepSummary};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "PGFED_WORKERS";

/// Sizes the global thread pool from [`WORKERS_ENV`] when it is set.
pub fn configure_workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got {raw:?}"))?;
    anyhow::ensure!(n >= 1, "{WORKERS_ENV} must be >= 1");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

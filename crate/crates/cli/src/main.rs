use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pgfed_cli::{configure_workers, parse_config, run_experiment, run_fig2_study, run_sweep};
use pgfed_core::AlgorithmTag;

/// Personalized federated learning experiments on simulated clients.
///
/// Everything except the flags below comes from the JSON config. Set
/// PGFED_WORKERS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "pgfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment for one seed.
    Run {
        /// Path to the JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Seed for data, partition, selection and local training.
        #[arg(long)]
        seed: u64,
        /// Override the config's algorithm (fedavg, fedavg_finetune, local, pgfed, pgfedmo, pgfed_ce, explicit_oracle).
        #[arg(long)]
        algo: Option<AlgorithmTag>,
        /// Override the number of rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every sweep algorithm for each seed and summarize final accuracy.
    Sweep {
        /// Path to the JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare explicit and implicit personalization of a trained FedAvg model.
    Fig2 {
        /// Path to the JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_workers()?;
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            algo,
            rounds,
            out,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(a) = algo {
                cfg.federation.algorithm = Some(a);
            }
            if let Some(r) = rounds {
                cfg.federation.rounds = r;
            }
            if let Some(o) = out {
                cfg.output.directory = o;
            }
            let run = run_experiment(&cfg, seed).context("run failed")?;
            println!(
                "{} seed {}: final mean accuracy {:.4} (std {:.4}) -> {}",
                run.algorithm,
                run.seed,
                run.final_mean_acc,
                run.final_std_acc,
                run.directory.display()
            );
        }
        Command::Sweep { config, seeds, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(o) = out {
                cfg.output.directory = o;
            }
            let seeds = match seeds {
                Some(s) => s,
                None => cfg.seeds()?.to_vec(),
            };
            let summary = run_sweep(&cfg, &seeds).context("sweep failed")?;
            print!("{}", summary.table());
            println!("-> {}", summary.directory.display());
        }
        Command::Fig2 { config, out } => {
            let mut cfg = parse_config(&config)?;
            if let Some(o) = out {
                cfg.output.directory = o;
            }
            let report = run_fig2_study(&cfg).context("fig2 study failed")?;
            println!("{:>8} {:>14} {:>14}", "seed", "explicit_gain", "implicit_gain");
            for s in &report.seeds {
                println!("{:>8} {:>14.3} {:>14.3}", s.seed, s.explicit_final(), s.implicit_final());
            }
            println!(
                "explicit >= implicit in {} of {} seeds -> {}",
                report.explicit_wins,
                report.seeds.len(),
                report.directory.display()
            );
        }
    }
    Ok(())
}

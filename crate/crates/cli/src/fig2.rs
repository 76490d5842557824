//! Explicit-versus-implicit personalization study.
//!
//! For each seed, FedAvg is trained for `federation.rounds` rounds. Its global
//! model is then personalized per client two ways, both by full-batch gradient
//! steps at `oracle.lr`: the explicit arm descends the local risk plus the
//! `oracle.mu`-weighted mean of every other client's true risk; the implicit
//! arm descends the local risk alone. Gains are test-accuracy differences to
//! the unpersonalized global model, in percentage points.

use std::fs;

use anyhow::Result;
use log::info;
use pgfed_core::algorithms::explicit_oracle_path;
use pgfed_core::metrics::individual_gain;
use pgfed_core::{AlgorithmTag, Dataset, ParamVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::{fresh_dir, RunManifest};
use crate::runner::{accuracies, build_federation};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Seed {
    pub seed: u64,
    /// Mean gain after each step, starting with step 0.
    pub explicit_trajectory: Vec<f64>,
    pub implicit_trajectory: Vec<f64>,
    /// Per-client gains after the last step.
    pub explicit_gains: Vec<f64>,
    pub implicit_gains: Vec<f64>,
}

impl Fig2Seed {
    pub fn explicit_final(&self) -> f64 {
        *self.explicit_trajectory.last().expect("trajectory holds step 0")
    }

    pub fn implicit_final(&self) -> f64 {
        *self.implicit_trajectory.last().expect("trajectory holds step 0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Report {
    #[serde(skip)]
    pub directory: std::path::PathBuf,
    pub steps: usize,
    pub seeds: Vec<Fig2Seed>,
    /// Seeds where the explicit arm's final mean gain is at least the implicit arm's.
    pub explicit_wins: usize,
}

pub fn study_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Fig2Seed> {
    let mut fed = build_federation(cfg, AlgorithmTag::Fedavg, seed)?;
    for _ in 0..cfg.federation.rounds {
        fed.run_round()?;
    }
    let start = fed.server().theta_glob.clone();
    let n = fed.clients().len();
    let baseline = accuracies(&fed, &vec![start.clone(); n])?;
    let sets: Vec<&Dataset> = fed.clients().iter().map(|c| &c.data.train).collect();
    let o = cfg.oracle;

    let paths = |mu: f64| -> Result<Vec<Vec<ParamVector>>> {
        (0..n)
            .into_par_iter()
            .map(|i| Ok(explicit_oracle_path(fed.model(), &sets, i, &start, mu, o.steps, o.lr)?))
            .collect()
    };
    let explicit = paths(o.mu)?;
    let implicit = paths(0.0)?;

    let arm = |paths: &[Vec<ParamVector>]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut trajectory = Vec::with_capacity(o.steps + 1);
        let mut last = Vec::new();
        for s in 0..=o.steps {
            let models: Vec<ParamVector> = paths.iter().map(|p| p[s].clone()).collect();
            let gain = individual_gain(&accuracies(&fed, &models)?, &baseline)?;
            trajectory.push(gain.mean);
            last = gain.per_client.into_values().collect();
        }
        Ok((trajectory, last))
    };
    let (explicit_trajectory, explicit_gains) = arm(&explicit)?;
    let (implicit_trajectory, implicit_gains) = arm(&implicit)?;
    Ok(Fig2Seed {
        seed,
        explicit_trajectory,
        implicit_trajectory,
        explicit_gains,
        implicit_gains,
    })
}

const BIN_WIDTH: f64 = 5.0;

pub fn run_fig2_study(cfg: &ExperimentConfig) -> Result<Fig2Report> {
    cfg.validate()?;
    let seeds = cfg.seeds()?.to_vec();
    let dir = fresh_dir(&cfg.output.directory, "fig2")?;
    let config_json = cfg.to_json();
    fs::write(dir.join("config.json"), &config_json)?;
    let manifest = RunManifest::begin(&dir, "fig2", &config_json, None)?;

    let mut results = Vec::new();
    for &seed in &seeds {
        let r = study_seed(cfg, seed)?;
        info!(
            "fig2 seed {seed}: explicit {:+.2} pp, implicit {:+.2} pp",
            r.explicit_final(),
            r.implicit_final()
        );
        results.push(r);
    }

    let mut w = csv::Writer::from_path(dir.join("trajectories.csv"))?;
    w.write_record(["seed", "step", "explicit_mean_gain", "implicit_mean_gain"])?;
    for r in &results {
        for (s, (e, i)) in r.explicit_trajectory.iter().zip(&r.implicit_trajectory).enumerate() {
            w.write_record([r.seed.to_string(), s.to_string(), e.to_string(), i.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("client_gains.csv"))?;
    w.write_record(["seed", "client_id", "explicit_gain", "implicit_gain"])?;
    for r in &results {
        for (c, (e, i)) in r.explicit_gains.iter().zip(&r.implicit_gains).enumerate() {
            w.write_record([r.seed.to_string(), c.to_string(), e.to_string(), i.to_string()])?;
        }
    }
    w.flush()?;

    let all = || results.iter().flat_map(|r| r.explicit_gains.iter().chain(&r.implicit_gains));
    let lo = (all().fold(0.0f64, |a, &b| a.min(b)) / BIN_WIDTH).floor() as i64;
    let hi = (all().fold(0.0f64, |a, &b| a.max(b)) / BIN_WIDTH).floor() as i64;
    let bin = |v: f64| ((v / BIN_WIDTH).floor() as i64 - lo) as usize;
    let mut counts = vec![(0usize, 0usize); (hi - lo + 1) as usize];
    for r in &results {
        r.explicit_gains.iter().for_each(|&v| counts[bin(v)].0 += 1);
        r.implicit_gains.iter().for_each(|&v| counts[bin(v)].1 += 1);
    }
    let mut w = csv::Writer::from_path(dir.join("gain_histogram.csv"))?;
    w.write_record(["bin_low", "bin_high", "explicit_count", "implicit_count"])?;
    for (k, (e, i)) in counts.iter().enumerate() {
        let low = (lo + k as i64) as f64 * BIN_WIDTH;
        w.write_record([low.to_string(), (low + BIN_WIDTH).to_string(), e.to_string(), i.to_string()])?;
    }
    w.flush()?;

    let report = Fig2Report {
        directory: dir.clone(),
        steps: cfg.oracle.steps,
        explicit_wins: results.iter().filter(|r| r.explicit_final() >= r.implicit_final()).count(),
        seeds: results,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.finish(&dir, "completed")?;
    Ok(report)
}

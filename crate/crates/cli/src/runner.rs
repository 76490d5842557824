//! Single runs and seed sweeps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{debug, info};
use pgfed_core::datagen::{dirichlet_partition, export_partition, load_csv, standardize_clients, synth_blobs};
use pgfed_core::metrics::{alpha_analytics, rounds_to_threshold, write_matrix_csv, write_metrics_csv};
use pgfed_core::models::accuracy;
use pgfed_core::{AlgorithmTag, ClientDataset, CommLedger, Federation, RoundRecord, SeededRng};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::{fresh_dir, RunManifest};

const TAG_DATA: u64 = 0xda7a;
const TAG_PARTITION: u64 = 0x9a27;

/// Generates (or loads), partitions and optionally standardizes the data for
/// one seed. Data and partition draw from independent streams of that seed.
pub fn build_clients(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    let data_seed = SeededRng::derive(seed, &[TAG_DATA]).next_u64();
    let partition_seed = SeededRng::derive(seed, &[TAG_PARTITION]).next_u64();
    let data = match &cfg.dataset.csv {
        Some(c) => load_csv(&c.path, &c.label_column, c.n_classes, data_seed)
            .with_context(|| format!("loading {}", c.path.display()))?,
        None => {
            let s = cfg.synthetic();
            synth_blobs(s.n_classes, s.n_features, s.n_samples, s.class_separation, data_seed)?
        }
    };
    let mut clients = dirichlet_partition(&data, &cfg.partition_spec(partition_seed))?;
    if cfg.dataset.standardize {
        standardize_clients(&mut clients)?;
    }
    Ok(clients)
}

pub fn build_federation(cfg: &ExperimentConfig, algorithm: AlgorithmTag, seed: u64) -> Result<Federation> {
    let clients = build_clients(cfg, seed)?;
    let train = &clients[0].train;
    let model = cfg.model_spec(train.n_features(), train.n_classes());
    Ok(Federation::new(cfg.federation_config(algorithm, seed), model, clients)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmTag,
    pub seed: u64,
    pub directory: PathBuf,
    pub rounds: usize,
    pub final_mean_acc: f64,
    pub final_std_acc: f64,
    /// First evaluated round reaching the configured threshold.
    pub rounds_to_threshold: Option<usize>,
    pub traffic: CommLedger,
    pub alpha_increases: usize,
    pub alpha_clamps: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_matrix(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    write_matrix_csv(m, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Executes every round of one (config, seed) pair into a fresh directory
/// under `output.directory` and returns its summary.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunSummary> {
    cfg.validate()?;
    let algorithm = cfg.algorithm()?;
    let dir = fresh_dir(&cfg.output.directory, &format!("{algorithm}-seed{seed}"))?;
    let config_json = cfg.to_json();
    fs::write(dir.join("config.json"), &config_json)?;
    let manifest = RunManifest::begin(&dir, "run", &config_json, Some(seed))?;
    info!("run {} -> {}", algorithm, dir.display());

    let mut fed = build_federation(cfg, algorithm, seed)?;
    {
        let data: Vec<ClientDataset> = fed.clients().iter().map(|c| c.data.clone()).collect();
        let mut w = create(&dir.join("partition.csv"))?;
        export_partition(&data, &mut w)?;
        w.flush()?;
    }
    let pgfed_family = algorithm.is_pgfed_family();
    if pgfed_family {
        write_matrix(&dir.join("alpha_initial.csv"), fed.initial_alpha())?;
    }

    let rounds = cfg.federation.rounds;
    let mut history: Vec<RoundRecord> = Vec::new();
    let (mut increases, mut clamps) = (0, 0);
    for t in 1..=rounds {
        let out = fed.run_round().with_context(|| format!("round {t}"))?;
        increases += out.alpha_increases;
        clamps += out.clamp_events;
        if t % cfg.eval.eval_every == 0 || t == rounds {
            let rec = fed.evaluate()?;
            debug!("round {t}: mean acc {:.4}", rec.mean_personalized_acc);
            history.push(rec);
        }
        let every = cfg.output.checkpoint_every;
        if every > 0 && t % every == 0 {
            let cp = serde_json::to_string_pretty(&fed.checkpoint())?;
            fs::write(dir.join(format!("checkpoint_round_{t:04}.json")), cp)?;
            if pgfed_family {
                write_matrix(&dir.join(format!("alpha_round_{t:04}.csv")), &fed.server().alpha)?;
            }
        }
    }

    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&history, &mut w)?;
    w.flush()?;

    let last = history.last().expect("final round is always evaluated");
    {
        let mut w = csv::Writer::from_path(dir.join("per_client.csv"))?;
        w.write_record(["client_id", "n_train", "test_acc", "train_loss"])?;
        for c in fed.clients() {
            let id = c.client_id;
            w.write_record([
                id.to_string(),
                c.data.n_train().to_string(),
                last.per_client_test_acc[&id].to_string(),
                last.per_client_train_loss[&id].to_string(),
            ])?;
        }
        w.flush()?;
    }
    {
        let models = fed.personalized_models()?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("models.csv"))?;
        for (i, m) in models.iter().enumerate() {
            w.write_record(std::iter::once(i.to_string()).chain(m.as_slice().iter().map(|v| v.to_string())))?;
        }
        w.flush()?;
    }
    if pgfed_family {
        let final_alpha = &fed.server().alpha;
        write_matrix(&dir.join("alpha_final.csv"), final_alpha)?;
        let n_train: BTreeMap<usize, usize> = fed.clients().iter().map(|c| (c.client_id, c.data.n_train())).collect();
        let analytics = alpha_analytics(fed.initial_alpha(), final_alpha, &n_train)?;
        write_matrix(&dir.join("alpha_delta.csv"), &analytics.delta)?;
        fs::write(dir.join("alpha_analytics.json"), serde_json::to_string_pretty(&analytics)?)?;
    }

    let (std, _, _) = last.spread();
    let summary = RunSummary {
        algorithm,
        seed,
        directory: dir.clone(),
        rounds,
        final_mean_acc: last.mean_personalized_acc,
        final_std_acc: std,
        rounds_to_threshold: rounds_to_threshold(&history, cfg.eval.threshold).map(|i| history[i - 1].round),
        traffic: fed.traffic(),
        alpha_increases: increases,
        alpha_clamps: clamps,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    manifest.finish(&dir, "completed")?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub algorithm: AlgorithmTag,
    /// `(seed, final mean personalized accuracy)` per run.
    pub runs: Vec<(u64, f64)>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub directory: PathBuf,
    pub arms: Vec<ArmSummary>,
}

impl SweepSummary {
    pub fn arm(&self, algorithm: AlgorithmTag) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.algorithm == algorithm)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>6} {:>10} {:>10}\n", "algorithm", "seeds", "mean_acc", "std_acc");
        for a in &self.arms {
            s.push_str(&format!(
                "{:<18} {:>6} {:>10.4} {:>10.4}\n",
                a.algorithm.as_str(),
                a.runs.len(),
                a.mean,
                a.std
            ));
        }
        s
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every sweep arm for every seed. `runs.csv` grows after each run, so a
/// failure leaves the completed runs on disk.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SweepSummary> {
    anyhow::ensure!(!seeds.is_empty(), "sweep needs at least one seed");
    cfg.validate()?;
    let arms = cfg.sweep_arms()?;
    let dir = fresh_dir(&cfg.output.directory, "sweep")?;
    let config_json = cfg.to_json();
    fs::write(dir.join("config.json"), &config_json)?;
    let manifest = RunManifest::begin(&dir, "sweep", &config_json, None)?;

    let mut runs_csv = csv::Writer::from_path(dir.join("runs.csv"))?;
    runs_csv.write_record(["algorithm", "seed", "final_mean_acc", "run_dir"])?;
    runs_csv.flush()?;

    let mut summaries = Vec::new();
    for &algorithm in &arms {
        let mut arm_cfg = cfg.clone();
        arm_cfg.federation.algorithm = Some(algorithm);
        arm_cfg.output.directory = dir.join("runs");
        let mut runs = Vec::new();
        for &seed in seeds {
            let run = match run_experiment(&arm_cfg, seed) {
                Ok(r) => r,
                Err(e) => {
                    manifest.finish(&dir, "failed")?;
                    return Err(e.context(format!("sweep run {algorithm} seed {seed}")));
                }
            };
            let rel = run.directory.strip_prefix(&dir).unwrap_or(&run.directory).display().to_string();
            runs_csv.write_record([algorithm.as_str().to_string(), seed.to_string(), run.final_mean_acc.to_string(), rel])?;
            runs_csv.flush()?;
            runs.push((seed, run.final_mean_acc));
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (mean, std) = mean_std(&accs);
        summaries.push(ArmSummary {
            algorithm,
            runs,
            mean,
            std,
        });
    }
    drop(runs_csv);

    let summary = SweepSummary {
        directory: dir.clone(),
        arms: summaries,
    };
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["algorithm", "n_seeds", "mean_final_acc", "std_final_acc"])?;
    for a in &summary.arms {
        w.write_record([
            a.algorithm.as_str().to_string(),
            a.runs.len().to_string(),
            a.mean.to_string(),
            a.std.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("summary.txt"), summary.table())?;
    manifest.finish(&dir, "completed")?;
    Ok(summary)
}

/// Per-client test accuracy of `theta` models, keyed by client id.
pub(crate) fn accuracies(fed: &Federation, models: &[pgfed_core::ParamVector]) -> Result<BTreeMap<usize, f64>> {
    fed.clients()
        .iter()
        .zip(models)
        .map(|(c, m)| Ok((c.client_id, accuracy(fed.model(), m, &c.data.test)?)))
        .collect()
}

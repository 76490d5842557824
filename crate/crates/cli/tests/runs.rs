use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use pgfed_cli::config::ExperimentConfig;
use pgfed_cli::manifest::{list_files, RunManifest};
use pgfed_cli::{run_experiment, run_fig2_study, run_sweep};
use pgfed_core::AlgorithmTag;

fn config(out: &Path, algorithm: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "dataset": {{"synthetic": {{"n_classes": 4, "n_features": 6, "n_samples": 600}}}},
        "federation": {{"algorithm": "{algorithm}", "n_clients": 8, "sample_rate": 0.5, "rounds": 6, "local_epochs": 2}},
        "oracle": {{"steps": 4}},
        "output": {{"checkpoint_every": 3}},
        "seeds": [1, 2, 3]
    }}"#
    );
    let mut cfg = ExperimentConfig::from_json(&text).unwrap();
    cfg.output.directory = out.to_path_buf();
    cfg
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn local_runs_report_zero_traffic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(tmp.path(), "local"), 1).unwrap();
    let metrics = run.directory.join("metrics.csv");
    for col in ["model_units_down", "model_units_up", "scalar_units_down", "scalar_units_up"] {
        assert!(column(&metrics, col).iter().all(|&v| v == 0.0), "{col}");
    }
    assert_eq!(column(&metrics, "round").len(), 6);
}

#[test]
fn zero_mu_pgfed_matches_fedavg_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut pg = config(tmp.path(), "pgfed");
    pg.federation.mu = 0.0;
    let mut fa = pg.clone();
    fa.federation.algorithm = Some(AlgorithmTag::Fedavg);
    let a = run_experiment(&pg, 2).unwrap();
    let b = run_experiment(&fa, 2).unwrap();
    let ca = column(&a.directory.join("metrics.csv"), "mean_acc");
    let cb = column(&b.directory.join("metrics.csv"), "mean_acc");
    assert_eq!(ca.len(), cb.len());
    for (x, y) in ca.iter().zip(&cb) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn manifest_lists_every_output_file() {
    let tmp = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(tmp.path(), "pgfedmo"), 3).unwrap();
    let manifest = RunManifest::load(&run.directory).unwrap();
    assert_eq!(manifest.status, "completed");
    assert_eq!(manifest.seed, Some(3));
    assert!(manifest.finished_unix.is_some());
    let listed: BTreeSet<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
    let on_disk: BTreeSet<String> = list_files(&run.directory)
        .unwrap()
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    assert_eq!(listed, on_disk);
    for name in [
        "metrics.csv",
        "alpha_initial.csv",
        "alpha_final.csv",
        "alpha_delta.csv",
        "alpha_analytics.json",
        "alpha_round_0003.csv",
        "checkpoint_round_0006.json",
        "models.csv",
        "partition.csv",
        "config.json",
    ] {
        assert!(listed.contains(name), "{name} missing");
    }
}

#[test]
fn runs_never_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "fedavg");
    let a = run_experiment(&cfg, 1).unwrap();
    let b = run_experiment(&cfg, 1).unwrap();
    assert_ne!(a.directory, b.directory);
    assert_eq!(
        std::fs::read(a.directory.join("metrics.csv")).unwrap(),
        std::fs::read(b.directory.join("metrics.csv")).unwrap()
    );
}

#[test]
fn single_seed_sweep_has_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run_sweep(&config(tmp.path(), "pgfed_ce"), &[4]).unwrap();
    assert_eq!(summary.arms.len(), 1);
    assert_eq!(summary.arms[0].std, 0.0);
}

#[test]
fn sweep_matches_hand_aggregation_of_run_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run_sweep(&config(tmp.path(), "local"), &[1, 2, 3]).unwrap();
    let mut finals = Vec::new();
    let mut r = csv::Reader::from_path(summary.directory.join("runs.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let acc = column(&summary.directory.join(&rec[3]).join("metrics.csv"), "mean_acc");
        finals.push(*acc.last().unwrap());
    }
    assert_eq!(finals.len(), 3);
    let mean = finals.iter().sum::<f64>() / 3.0;
    let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let arm = &summary.arms[0];
    assert!((arm.mean - mean).abs() <= 1e-12);
    assert!((arm.std - std).abs() <= 1e-12);
    let text = std::fs::read_to_string(summary.directory.join("summary.txt")).unwrap();
    assert!(text.contains("local"));
}

#[test]
fn empty_seed_list_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_sweep(&config(tmp.path(), "local"), &[]).is_err());
}

#[test]
fn failed_sweep_keeps_completed_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "local");
    cfg.sweep.algorithms = vec![AlgorithmTag::Local, AlgorithmTag::ExplicitOracle];
    cfg.oracle.lr = 1e308;
    assert!(run_sweep(&cfg, &[1, 2]).is_err());
    let dir = tmp.path().join("sweep");
    let mut r = csv::Reader::from_path(dir.join("runs.csv")).unwrap();
    assert_eq!(r.records().count(), 2);
    assert_eq!(RunManifest::load(&dir).unwrap().status, "failed");
}

#[test]
fn fig2_arms_coincide_without_non_local_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "fedavg");
    cfg.seeds = Some(vec![1]);
    cfg.oracle.mu = 0.0;
    let report = run_fig2_study(&cfg).unwrap();
    let s = &report.seeds[0];
    assert_eq!(s.explicit_trajectory, s.implicit_trajectory);
    assert_eq!(s.explicit_trajectory.len(), 5);
    for f in ["trajectories.csv", "client_gains.csv", "gain_histogram.csv", "summary.json"] {
        assert!(report.directory.join(f).exists(), "{f}");
    }
}

#[test]
fn fig2_without_steps_has_no_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "fedavg");
    cfg.seeds = Some(vec![2]);
    cfg.oracle.steps = 0;
    let report = run_fig2_study(&cfg).unwrap();
    let s = &report.seeds[0];
    assert_eq!(s.explicit_trajectory, vec![0.0]);
    assert_eq!(s.implicit_trajectory, vec![0.0]);
    assert!(s.explicit_gains.iter().chain(&s.implicit_gains).all(|&g| g == 0.0));
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    let mut cfg = config(&tmp.path().join("out"), "fedavg");
    cfg.federation.rounds = 2;
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let bin = env!("CARGO_BIN_EXE_pgfed");

    let ok = Command::new(bin)
        .env("RUST_LOG", "warn")
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "5", "--algo", "pgfed_ce", "--rounds", "3"])
        .status()
        .unwrap();
    assert!(ok.success());
    let run_dir = tmp.path().join("out/pgfed_ce-seed5");
    assert_eq!(column(&run_dir.join("metrics.csv"), "round").len(), 3);

    let bad_path = tmp.path().join("bad.json");
    std::fs::write(&bad_path, r#"{"federation": {"algorithm": "pgfed", "beta": 1.5}, "seeds": [1]}"#).unwrap();
    let out = Command::new(bin).args(["run", "--config"]).arg(&bad_path).args(["--seed", "1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta in [0,1)"));

    let help = Command::new(bin).args(["run", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--seed", "--algo", "--rounds", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
}

//! Experiment configuration: a single JSON document of nested blocks.
//!
//! Every field has a default except `federation.algorithm` and `seeds`.
//! Unknown keys are rejected at parse time.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pgfed_core::models::ModelKind;
use pgfed_core::{AlgorithmTag, FederationConfig, ModelSpec, OracleSettings, PartitionSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Used when `csv` is absent.
    pub synthetic: Option<SyntheticConfig>,
    pub csv: Option<CsvConfig>,
    pub partition: PartitionConfig,
    /// Standardize features with statistics of the union of training splits.
    pub standardize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            csv: None,
            partition: PartitionConfig::default(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub n_features: usize,
    pub n_samples: usize,
    pub class_separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_features: 20,
            n_samples: 4000,
            class_separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            dirichlet_alpha: 0.3,
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub l2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            hidden_dim: 32,
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<AlgorithmTag>,
    pub n_clients: usize,
    pub sample_rate: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub mu: f64,
    pub beta: f64,
    pub momentum: f64,
    pub finetune_epochs: usize,
}

impl Default for FederationBlock {
    fn default() -> Self {
        Self {
            algorithm: None,
            n_clients: 100,
            sample_rate: 0.25,
            rounds: 300,
            local_epochs: 5,
            batch_size: 32,
            eta1: 0.05,
            eta2: 0.05,
            mu: 0.01,
            beta: 0.5,
            momentum: 0.9,
            finetune_epochs: 5,
        }
    }
}

/// The explicit-objective oracle: `steps` full-batch gradient steps at `lr`
/// with non-local weight `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBlock {
    pub steps: usize,
    pub mu: f64,
    pub lr: f64,
}

impl Default for OracleBlock {
    fn default() -> Self {
        let d = OracleSettings::default();
        Self {
            steps: d.steps,
            mu: d.mu,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_every: 1,
            threshold: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Write a checkpoint and an α snapshot every this many rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Algorithms compared by `sweep`; empty means just `federation.algorithm`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub algorithms: Vec<AlgorithmTag>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid config document")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn algorithm(&self) -> Result<AlgorithmTag> {
        self.federation.algorithm.context("algorithm required")
    }

    pub fn seeds(&self) -> Result<&[u64]> {
        match &self.seeds {
            Some(s) if !s.is_empty() => Ok(s),
            Some(_) => bail!("seeds must not be empty"),
            None => bail!("seeds required"),
        }
    }

    /// Algorithms a sweep compares.
    pub fn sweep_arms(&self) -> Result<Vec<AlgorithmTag>> {
        if self.sweep.algorithms.is_empty() {
            Ok(vec![self.algorithm()?])
        } else {
            Ok(self.sweep.algorithms.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm()?;
        self.seeds()?;
        let f = &self.federation;
        check(f.n_clients >= 1, "federation.n_clients >= 1")?;
        check(f.sample_rate > 0.0 && f.sample_rate <= 1.0, "federation.sample_rate in (0,1]")?;
        check(
            (f.sample_rate * f.n_clients as f64).round() >= 1.0,
            "federation.sample_rate selects at least one client",
        )?;
        check(f.rounds >= 1, "federation.rounds >= 1")?;
        check(f.local_epochs >= 1, "federation.local_epochs >= 1")?;
        check(f.batch_size >= 1, "federation.batch_size >= 1")?;
        for (key, v) in [("federation.eta1", f.eta1), ("federation.eta2", f.eta2), ("federation.mu", f.mu)] {
            check(v.is_finite() && v >= 0.0, &format!("{key} >= 0"))?;
        }
        check((0.0..1.0).contains(&f.beta), "beta in [0,1)")?;
        check((0.0..1.0).contains(&f.momentum), "momentum in [0,1)")?;

        let o = &self.oracle;
        check(o.mu.is_finite() && o.mu >= 0.0, "oracle.mu >= 0")?;
        check(o.lr.is_finite() && o.lr >= 0.0, "oracle.lr >= 0")?;

        let d = &self.dataset;
        check(
            d.synthetic.is_none() || d.csv.is_none(),
            "dataset: give either synthetic or csv, not both",
        )?;
        if let Some(s) = &d.synthetic {
            check(s.n_classes >= 2, "dataset.synthetic.n_classes >= 2")?;
            check(s.n_features >= 1, "dataset.synthetic.n_features >= 1")?;
            check(s.n_samples >= s.n_classes, "dataset.synthetic.n_samples >= n_classes")?;
            check(
                s.class_separation.is_finite() && s.class_separation >= 0.0,
                "dataset.synthetic.class_separation >= 0",
            )?;
        }
        let p = &d.partition;
        check(p.dirichlet_alpha > 0.0, "dataset.partition.dirichlet_alpha > 0")?;
        check(
            p.test_fraction > 0.0 && p.test_fraction < 1.0,
            "dataset.partition.test_fraction in (0,1)",
        )?;

        let m = &self.model;
        check(
            m.kind == ModelKind::SoftmaxLinear || m.hidden_dim >= 1,
            "model.hidden_dim >= 1",
        )?;
        check(m.l2.is_finite() && m.l2 >= 0.0, "model.l2 >= 0")?;
        check(self.eval.eval_every >= 1, "eval.eval_every >= 1")?;
        check((0.0..=1.0).contains(&self.eval.threshold), "eval.threshold in [0,1]")?;
        Ok(())
    }

    /// Clients per round.
    pub fn clients_per_round(&self) -> usize {
        (self.federation.sample_rate * self.federation.n_clients as f64).round() as usize
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        self.dataset.synthetic.unwrap_or_default()
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            n_clients: self.federation.n_clients,
            dirichlet_alpha: self.dataset.partition.dirichlet_alpha,
            test_fraction: self.dataset.partition.test_fraction,
            seed,
        }
    }

    pub fn model_spec(&self, n_features: usize, n_classes: usize) -> ModelSpec {
        let spec = match self.model.kind {
            ModelKind::SoftmaxLinear => ModelSpec::softmax_linear(n_features, n_classes),
            ModelKind::Mlp => ModelSpec::mlp(n_features, self.model.hidden_dim, n_classes),
        };
        spec.with_l2(self.model.l2)
    }

    pub fn federation_config(&self, algorithm: AlgorithmTag, seed: u64) -> FederationConfig {
        let f = &self.federation;
        let mut cfg = FederationConfig::new(f.n_clients, algorithm, seed);
        cfg.sample_rate = f.sample_rate;
        cfg.rounds = f.rounds;
        cfg.local_epochs = f.local_epochs;
        cfg.batch_size = f.batch_size;
        cfg.eta1 = f.eta1;
        cfg.eta2 = f.eta2;
        cfg.mu = f.mu;
        cfg.beta = f.beta;
        cfg.momentum = f.momentum;
        cfg.finetune_epochs = f.finetune_epochs;
        cfg.oracle = OracleSettings {
            steps: self.oracle.steps,
            mu: self.oracle.mu,
            lr: self.oracle.lr,
        };
        cfg
    }
}

fn check(ok: bool, constraint: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        bail!("{constraint}")
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?;
    if let Some(csv) = &mut cfg.dataset.csv {
        if csv.path.is_relative() {
            if let Some(dir) = path.parent() {
                csv.path = dir.join(&csv.path);
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"federation": {"algorithm": "pgfed"}, "seeds": [1]}"#;

    fn with(patch: &str) -> String {
        format!(r#"{{"federation": {{"algorithm": "pgfed", {patch}}}, "seeds": [1]}}"#)
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.federation.sample_rate, 0.25);
        assert_eq!(cfg.federation.local_epochs, 5);
        assert_eq!(cfg.federation.momentum, 0.9);
        assert_eq!(cfg.federation.rounds, 300);
        assert_eq!(cfg.federation.mu, 0.01);
        assert_eq!(cfg.federation.beta, 0.5);
        assert_eq!(cfg.clients_per_round(), 25);
    }

    #[test]
    fn quarter_of_hundred_clients_is_twenty_five() {
        let cfg = ExperimentConfig::from_json(&with(r#""sample_rate": 0.25, "n_clients": 100"#)).unwrap();
        assert_eq!(cfg.clients_per_round(), 25);
        assert_eq!(cfg.federation_config(AlgorithmTag::Pgfed, 1).clients_per_round(), 25);
    }

    #[test]
    fn missing_algorithm_is_named() {
        let err = ExperimentConfig::from_json(r#"{"seeds": [1]}"#).unwrap_err();
        assert!(format!("{err:#}").contains("algorithm required"));
    }

    #[test]
    fn missing_or_empty_seeds_are_errors() {
        let err = ExperimentConfig::from_json(r#"{"federation": {"algorithm": "local"}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("seeds required"));
        let err = ExperimentConfig::from_json(r#"{"federation": {"algorithm": "local"}, "seeds": []}"#).unwrap_err();
        assert!(format!("{err:#}").contains("seeds"));
    }

    #[test]
    fn out_of_range_beta_is_named() {
        let err = ExperimentConfig::from_json(&with(r#""beta": 1.5"#)).unwrap_err();
        assert!(format!("{err:#}").contains("beta in [0,1)"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(&with(r#""sample_rte": 0.5"#)).unwrap_err();
        assert!(format!("{err:#}").contains("sample_rte"));
        assert!(ExperimentConfig::from_json(r#"{"federation": {"algorithm": "pgfed"}, "seeds": [1], "extra": 1}"#).is_err());
    }

    #[test]
    fn unknown_algorithm_is_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"federation": {"algorithm": "fedprox"}, "seeds": [1]}"#).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"{
            "dataset": {"synthetic": {"n_classes": 4, "n_samples": 400}, "partition": {"dirichlet_alpha": 0.1}},
            "model": {"kind": "mlp", "hidden_dim": 8},
            "federation": {"algorithm": "pgfed_ce", "n_clients": 12, "mu": 0.05},
            "oracle": {"steps": 3},
            "eval": {"eval_every": 2},
            "output": {"directory": "out", "checkpoint_every": 5},
            "sweep": {"algorithms": ["pgfed", "local"]},
            "seeds": [3, 4]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn both_sources_are_rejected() {
        let text = r#"{"dataset": {"synthetic": {}, "csv": {"path": "x.csv"}},
            "federation": {"algorithm": "pgfed"}, "seeds": [1]}"#;
        let err = ExperimentConfig::from_json(text).unwrap_err();
        assert!(format!("{err:#}").contains("either synthetic or csv"));
    }

    #[test]
    fn sweep_arms_default_to_the_algorithm() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.sweep_arms().unwrap(), vec![AlgorithmTag::Pgfed]);
    }
}

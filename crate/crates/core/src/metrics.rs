//! Personalized-accuracy metrics, the communication ledger and α-matrix
//! analytics.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgorithmTag;
use crate::error::{Error, Result};

/// Transfer counts. A model unit is one `d`-dimensional vector, a scalar unit
/// one real number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub model_units_down: u64,
    pub model_units_up: u64,
    pub scalar_units_down: u64,
    pub scalar_units_up: u64,
}

impl CommLedger {
    pub fn model_units(&self) -> u64 {
        self.model_units_down + self.model_units_up
    }

    pub fn scalar_units(&self) -> u64 {
        self.scalar_units_down + self.scalar_units_up
    }

    fn times(self, k: u64) -> Self {
        Self {
            model_units_down: self.model_units_down * k,
            model_units_up: self.model_units_up * k,
            scalar_units_down: self.scalar_units_down * k,
            scalar_units_up: self.scalar_units_up * k,
        }
    }
}

impl Add for CommLedger {
    type Output = CommLedger;

    fn add(self, rhs: Self) -> Self {
        Self {
            model_units_down: self.model_units_down + rhs.model_units_down,
            model_units_up: self.model_units_up + rhs.model_units_up,
            scalar_units_down: self.scalar_units_down + rhs.scalar_units_down,
            scalar_units_up: self.scalar_units_up + rhs.scalar_units_up,
        }
    }
}

impl AddAssign for CommLedger {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Predicted traffic of round `t` with `m` selected clients.
///
/// Per selected client, for `t > 1`:
///
/// | algorithm         | model down | model up | scalars down | scalars up |
/// |-------------------|-----------:|---------:|-------------:|-----------:|
/// | pgfed, pgfedmo    | 3          | 2        | M            | M + 1      |
/// | pgfed_ce          | 2          | 2        | M + 1        | M + 1      |
/// | fedavg family     | 1          | 1        | 0            | 0          |
/// | local             | 0          | 0        | 0            | 0          |
///
/// In round 1 the PGFed family downloads only the global model and uploads
/// `θᵢ`, `∇f(θᵢ)` and `g_α⁽¹⁾`.
pub fn ledger_charge(algorithm: AlgorithmTag, t: usize, m: usize) -> Result<CommLedger> {
    if t == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    let mu = m as u64;
    let per_client = match algorithm {
        AlgorithmTag::Local => CommLedger::default(),
        AlgorithmTag::Fedavg | AlgorithmTag::FedavgFinetune | AlgorithmTag::ExplicitOracle => CommLedger {
            model_units_down: 1,
            model_units_up: 1,
            ..Default::default()
        },
        AlgorithmTag::Pgfed | AlgorithmTag::Pgfedmo | AlgorithmTag::PgfedCe if t == 1 => CommLedger {
            model_units_down: 1,
            model_units_up: 2,
            scalar_units_down: 0,
            scalar_units_up: 1,
        },
        AlgorithmTag::Pgfed | AlgorithmTag::Pgfedmo => CommLedger {
            model_units_down: 3,
            model_units_up: 2,
            scalar_units_down: mu,
            scalar_units_up: mu + 1,
        },
        AlgorithmTag::PgfedCe => CommLedger {
            model_units_down: 2,
            model_units_up: 2,
            scalar_units_down: mu + 1,
            scalar_units_up: mu + 1,
        },
    };
    Ok(per_client.times(mu))
}

/// Metrics snapshot after a round, taken over all clients' personalized models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub per_client_test_acc: BTreeMap<usize, f64>,
    pub mean_personalized_acc: f64,
    pub per_client_train_loss: BTreeMap<usize, f64>,
    /// Cumulative traffic up to and including this round.
    pub traffic: CommLedger,
}

impl RoundRecord {
    pub fn new(
        round: usize,
        per_client_test_acc: BTreeMap<usize, f64>,
        per_client_train_loss: BTreeMap<usize, f64>,
        traffic: CommLedger,
    ) -> Self {
        let mean_personalized_acc = mean(per_client_test_acc.values().copied());
        Self {
            round,
            per_client_test_acc,
            mean_personalized_acc,
            per_client_train_loss,
            traffic,
        }
    }

    /// Population standard deviation, min and max of per-client accuracy.
    pub fn spread(&self) -> (f64, f64, f64) {
        let values: Vec<f64> = self.per_client_test_acc.values().copied().collect();
        let std = population_std(&values);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (std, min, max)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

pub const METRICS_HEADER: [&str; 9] = [
    "round",
    "mean_acc",
    "std_acc",
    "min_acc",
    "max_acc",
    "model_units_down",
    "model_units_up",
    "scalar_units_down",
    "scalar_units_up",
];

/// Writes the metrics CSV, one row per record.
pub fn write_metrics_csv<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let (std, min, max) = r.spread();
        w.write_record([
            r.round.to_string(),
            r.mean_personalized_acc.to_string(),
            std.to_string(),
            min.to_string(),
            max.to_string(),
            r.traffic.model_units_down.to_string(),
            r.traffic.model_units_up.to_string(),
            r.traffic.scalar_units_down.to_string(),
            r.traffic.scalar_units_up.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-client gain over a baseline, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSummary {
    pub mean: f64,
    pub std: f64,
    pub per_client: BTreeMap<usize, f64>,
}

pub fn individual_gain(
    per_client_acc: &BTreeMap<usize, f64>,
    baseline_acc: &BTreeMap<usize, f64>,
) -> Result<GainSummary> {
    if !per_client_acc.keys().eq(baseline_acc.keys()) {
        return Err(Error::InvalidArgument(
            "individual_gain needs identical client sets".into(),
        ));
    }
    let per_client: BTreeMap<usize, f64> = per_client_acc
        .iter()
        .map(|(&k, &v)| (k, 100.0 * (v - baseline_acc[&k])))
        .collect();
    let values: Vec<f64> = per_client.values().copied().collect();
    Ok(GainSummary {
        mean: mean(values.iter().copied()),
        std: population_std(&values),
        per_client,
    })
}

/// First (1-based) round whose mean personalized accuracy reaches `threshold`.
pub fn rounds_to_threshold(history: &[RoundRecord], threshold: f64) -> Option<usize> {
    history
        .iter()
        .position(|r| r.mean_personalized_acc >= threshold)
        .map(|i| i + 1)
}

/// Change of the α matrix over a run and its relation to client sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaAnalytics {
    pub delta: Vec<Vec<f64>>,
    /// Column means: how much everyone's weight on client `j` moved.
    pub col_means: Vec<f64>,
    /// Row means: how much client `i`'s weights moved.
    pub row_means: Vec<f64>,
    pub corr_col_vs_n: Option<f64>,
    pub corr_row_vs_n: Option<f64>,
}

pub fn alpha_analytics(
    initial: &[Vec<f64>],
    final_: &[Vec<f64>],
    n_train: &BTreeMap<usize, usize>,
) -> Result<AlphaAnalytics> {
    let n = initial.len();
    let square = |a: &[Vec<f64>]| a.len() == n && a.iter().all(|r| r.len() == n);
    if n == 0 || !square(initial) || !square(final_) {
        return Err(Error::InvalidArgument("alpha matrices must be square and of equal shape".into()));
    }
    if n_train.len() != n || n_train.keys().copied().ne(0..n) {
        return Err(Error::InvalidArgument("n_train must have one entry per client".into()));
    }
    let delta: Vec<Vec<f64>> = final_
        .iter()
        .zip(initial)
        .map(|(f, i)| f.iter().zip(i).map(|(a, b)| a - b).collect())
        .collect();
    let row_means: Vec<f64> = delta.iter().map(|r| mean(r.iter().copied())).collect();
    let col_means: Vec<f64> = (0..n).map(|j| mean(delta.iter().map(|r| r[j]))).collect();
    let sizes: Vec<f64> = n_train.values().map(|&v| v as f64).collect();
    Ok(AlphaAnalytics {
        corr_col_vs_n: pearson(&col_means, &sizes),
        corr_row_vs_n: pearson(&row_means, &sizes),
        delta,
        col_means,
        row_means,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x.iter().copied());
    let my = mean(y.iter().copied());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Dense matrix as CSV, no header.
pub fn write_matrix_csv<W: Write>(matrix: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in matrix {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

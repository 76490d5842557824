//! Synthetic data, Dirichlet label-skew partitioning and CSV ingestion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Row-major feature matrix with integer class labels in `[0, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if n_features == 0 || n_classes == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one feature and one class".into(),
            ));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_features,
                actual: features.len(),
            });
        }
        if let Some(pos) = labels.iter().position(|&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} at sample {pos} is outside [0, {n_classes})",
                labels[pos]
            )));
        }
        crate::numerics::check_finite(&features)?;
        Ok(Self {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.n_features, labels, self.n_classes)
    }
}

/// One client's local train/test split.
///
/// `train_indices`/`test_indices` point back into the dataset the partition
/// was drawn from and drive the partition export.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientDataset {
    pub fn n_train(&self) -> usize {
        self.train.n_samples()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub dirichlet_alpha: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_clients must be >= 2, got {}",
                self.n_clients
            )));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dirichlet_alpha must be a positive finite number, got {}",
                self.dirichlet_alpha
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction must be in (0,1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Gaussian class clusters with unit isotropic covariance.
///
/// Class `c` is centred `class_separation` away from the origin along its own
/// random unit direction. Labels are balanced: the first `n_samples % n_classes`
/// classes get one extra sample. Rows come out shuffled.
pub fn synth_blobs(
    n_classes: usize,
    n_features: usize,
    n_samples: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || n_features < 1 || n_samples < n_classes {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs n_classes >= 2, n_features >= 1, n_samples >= n_classes \
             (got {n_classes}, {n_features}, {n_samples})"
        )));
    }
    if !(class_separation >= 0.0 && class_separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "class_separation must be finite and nonnegative, got {class_separation}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let centres: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let dir: Vec<f64> = loop {
                let d: Vec<f64> = (0..n_features).map(|_| rng.normal()).collect();
                if d.iter().any(|v| *v != 0.0) {
                    break d;
                }
            };
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|v| class_separation * v / norm).collect()
        })
        .collect();

    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    rng.shuffle(&mut labels);
    let mut features = Vec::with_capacity(n_samples * n_features);
    for &label in &labels {
        features.extend(centres[label].iter().map(|m| m + rng.normal()));
    }
    Dataset::new(features, n_features, labels, n_classes)
}

/// Splits `data` across clients with per-class Dirichlet label skew.
///
/// For every class a proportion vector over clients is drawn from
/// `Dir(alpha·1_N)` and that class's samples are assigned to clients by
/// independent categorical draws. Clients left with fewer than two samples are
/// topped up by moving samples from the largest client. Each client's pool is
/// then split into train/test per class.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let n_clients = spec.n_clients;
    if data.n_samples() < 2 * n_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot give {} clients one train and one test sample each",
            data.n_samples(),
            n_clients
        )));
    }
    let mut rng = SeededRng::new(spec.seed);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..data.n_classes() {
        let mut members: Vec<usize> = (0..data.n_samples())
            .filter(|&i| data.label(i) == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let proportions = rng.dirichlet(spec.dirichlet_alpha, n_clients);
        for idx in members {
            pools[rng.categorical(&proportions)].push(idx);
        }
    }

    repair_small_pools(&mut pools, 2);

    let mut clients = Vec::with_capacity(n_clients);
    for (client_id, pool) in pools.into_iter().enumerate() {
        let (train_indices, test_indices) = stratified_split(data, pool, spec.test_fraction, &mut rng);
        clients.push(ClientDataset {
            client_id,
            train: data.subset(&train_indices)?,
            test: data.subset(&test_indices)?,
            train_indices,
            test_indices,
        });
    }
    Ok(clients)
}

fn repair_small_pools(pools: &mut [Vec<usize>], minimum: usize) {
    while let Some(needy) = pools.iter().position(|p| p.len() < minimum) {
        let donor = pools
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one pool");
        let moved = pools[donor].pop().expect("donor pool is nonempty");
        pools[needy].push(moved);
    }
}

fn stratified_split(
    data: &Dataset,
    pool: Vec<usize>,
    test_fraction: f64,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes()];
    for idx in pool {
        by_class[data.label(idx)].push(idx);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.sort_unstable();
        rng.shuffle(&mut members);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    // small pools can round to an empty side
    if test.is_empty() {
        test.push(train.pop().expect("pool has at least two samples"));
    } else if train.is_empty() {
        train.push(test.pop().expect("pool has at least two samples"));
    }
    (train, test)
}

/// Standardizes every column to zero mean and unit variance, using statistics
/// of the union of all clients' training sets. Constant columns are centred only.
pub fn standardize_clients(clients: &mut [ClientDataset]) -> Result<()> {
    let first = clients.first().ok_or(Error::Empty("client list"))?;
    let n_features = first.train.n_features();
    let mut sum = vec![0.0; n_features];
    let mut count = 0usize;
    for c in clients.iter() {
        for i in 0..c.train.n_samples() {
            for (s, v) in sum.iter_mut().zip(c.train.row(i)) {
                *s += v;
            }
        }
        count += c.train.n_samples();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; n_features];
    for c in clients.iter() {
        for i in 0..c.train.n_samples() {
            for ((acc, v), m) in var.iter_mut().zip(c.train.row(i)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / count as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    for c in clients.iter_mut() {
        for ds in [&mut c.train, &mut c.test] {
            for row in ds.features.chunks_mut(n_features) {
                for ((v, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                    *v = (*v - m) / s;
                }
            }
        }
    }
    Ok(())
}

/// Writes `client_id,split,sample_index` rows for every assigned sample.
pub fn export_partition<W: Write>(clients: &[ClientDataset], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["client_id", "split", "sample_index"])?;
    for c in clients {
        for (split, indices) in [("train", &c.train_indices), ("test", &c.test_indices)] {
            for idx in indices {
                writer.write_record([c.client_id.to_string(), split.to_string(), idx.to_string()])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a headered, comma-separated file. Every column except `label_column`
/// is a feature. Rows are shuffled deterministically by `seed`.
///
/// When `n_classes` is `None` the class count is `max label + 1`.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    n_classes: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let label_idx = headers.iter().position(|h| h.trim() == label_column).ok_or_else(|| {
        Error::Csv {
            row: 1,
            column: label_column.to_string(),
            message: "label column not found in header".into(),
        }
    })?;
    let n_features = headers.len() - 1;
    if n_features == 0 {
        return Err(Error::Csv {
            row: 1,
            column: label_column.to_string(),
            message: "no feature columns".into(),
        });
    }

    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row_no = i + 2;
        let record = record.map_err(|e| Error::Csv {
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut features = Vec::with_capacity(n_features);
        let mut label = None;
        for (col, field) in record.iter().enumerate() {
            let name = headers.get(col).unwrap_or("").to_string();
            let field = field.trim();
            if col == label_idx {
                label = Some(parse_label(field).ok_or_else(|| Error::Csv {
                    row: row_no,
                    column: name,
                    message: format!("label {field:?} is not a nonnegative integer"),
                })?);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Csv {
                    row: row_no,
                    column: name.clone(),
                    message: format!("cannot parse {field:?} as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        row: row_no,
                        column: name,
                        message: format!("non-finite feature {field:?}"),
                    });
                }
                features.push(v);
            }
        }
        let label = label.expect("label column is within the record");
        if let Some(c) = n_classes {
            if label >= c {
                return Err(Error::Csv {
                    row: row_no,
                    column: label_column.to_string(),
                    message: format!("label {label} outside declared class count {c}"),
                });
            }
        }
        rows.push((features, label));
    }
    if rows.is_empty() {
        return Err(Error::Empty("empty dataset"));
    }
    let n_classes = n_classes.unwrap_or_else(|| rows.iter().map(|r| r.1).max().unwrap_or(0) + 1);
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut rows);
    let labels = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    Dataset::new(features, n_features, labels, n_classes.max(2))
}

fn parse_label(field: &str) -> Option<usize> {
    if let Ok(v) = field.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64).then_some(v as usize)
}

/// Mean over clients of the total-variation distance between each client's
/// label distribution (train ∪ test) and the pooled distribution.
pub fn mean_label_skew(clients: &[ClientDataset]) -> f64 {
    let n_classes = clients[0].train.n_classes();
    let mut global = vec![0.0; n_classes];
    let per_client: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| {
            let mut counts = vec![0.0; n_classes];
            for &l in c.train.labels().iter().chain(c.test.labels()) {
                counts[l] += 1.0;
            }
            for (g, v) in global.iter_mut().zip(&counts) {
                *g += v;
            }
            counts
        })
        .collect();
    let total: f64 = global.iter().sum();
    let global: Vec<f64> = global.iter().map(|g| g / total).collect();
    per_client
        .iter()
        .map(|counts| {
            let n: f64 = counts.iter().sum();
            0.5 * counts
                .iter()
                .zip(&global)
                .map(|(c, g)| (c / n - g).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / clients.len() as f64
}

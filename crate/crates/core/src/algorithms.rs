//! Client-side update strategies.
//!
//! Everything here is a pure function of its inputs plus a private RNG used
//! for mini-batch shuffling, so the engine may run selected clients in
//! parallel and still reproduce a run bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::models::{risk, risk_and_grad, risk_and_grad_on, risk_grad, ModelSpec, OptimizerState};
use crate::numerics::{axpy, dot, ParamVector, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmTag {
    Local,
    Fedavg,
    FedavgFinetune,
    ExplicitOracle,
    Pgfed,
    Pgfedmo,
    PgfedCe,
}

impl AlgorithmTag {
    pub const ALL: [AlgorithmTag; 7] = [
        AlgorithmTag::Local,
        AlgorithmTag::Fedavg,
        AlgorithmTag::FedavgFinetune,
        AlgorithmTag::ExplicitOracle,
        AlgorithmTag::Pgfed,
        AlgorithmTag::Pgfedmo,
        AlgorithmTag::PgfedCe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmTag::Local => "local",
            AlgorithmTag::Fedavg => "fedavg",
            AlgorithmTag::FedavgFinetune => "fedavg_finetune",
            AlgorithmTag::ExplicitOracle => "explicit_oracle",
            AlgorithmTag::Pgfed => "pgfed",
            AlgorithmTag::Pgfedmo => "pgfedmo",
            AlgorithmTag::PgfedCe => "pgfed_ce",
        }
    }

    /// Algorithms that learn an α matrix and exchange gradients.
    pub fn is_pgfed_family(self) -> bool {
        matches!(self, AlgorithmTag::Pgfed | AlgorithmTag::Pgfedmo | AlgorithmTag::PgfedCe)
    }

    /// Algorithms whose rounds are plain FedAvg rounds.
    pub fn trains_like_fedavg(self) -> bool {
        matches!(
            self,
            AlgorithmTag::Fedavg | AlgorithmTag::FedavgFinetune | AlgorithmTag::ExplicitOracle
        )
    }
}

impl fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm tag {s:?}")))
    }
}

/// Mini-batch SGD-momentum schedule for one local training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Runs `epochs` of shuffled mini-batch SGD-momentum from `start`, adding
/// `extra_grad` to every batch gradient. `after_step` sees the parameters
/// after each step.
pub fn local_sgd(
    spec: &ModelSpec,
    data: &Dataset,
    start: &ParamVector,
    schedule: &LocalSchedule,
    rng: &mut SeededRng,
    extra_grad: Option<&ParamVector>,
    mut after_step: impl FnMut(&ParamVector) -> Result<()>,
) -> Result<ParamVector> {
    if schedule.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut theta = start.clone();
    let mut optimizer = OptimizerState::new(theta.dim(), schedule.lr, schedule.momentum)?;
    let mut order: Vec<usize> = (0..data.n_samples()).collect();
    for _ in 0..schedule.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(schedule.batch_size) {
            let (_, mut grad) = risk_and_grad_on(spec, &theta, data, batch)?;
            if let Some(extra) = extra_grad {
                grad.add_scaled(1.0, extra)?;
            }
            optimizer.step(&mut theta, &grad)?;
            after_step(&theta)?;
        }
    }
    Ok(theta)
}

/// FedAvg local update: start from the global model and run local SGD.
pub fn client_update_fedavg(
    spec: &ModelSpec,
    data: &Dataset,
    theta_glob: &ParamVector,
    schedule: &LocalSchedule,
    rng: &mut SeededRng,
) -> Result<ParamVector> {
    local_sgd(spec, data, theta_glob, schedule, rng, None, |_| Ok(()))
}

/// Plain local SGD-momentum from `theta`.
pub fn fine_tune(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &ParamVector,
    schedule: &LocalSchedule,
    rng: &mut SeededRng,
) -> Result<ParamVector> {
    local_sgd(spec, data, theta, schedule, rng, None, |_| Ok(()))
}

/// What a client sends back after a PGFed-family update.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdatePayload {
    pub theta: ParamVector,
    /// `μ·(f(θ) − ∇f(θ)ᵀθ)` over the full local training set.
    pub g_alpha1: f64,
    /// Full-training-set gradient at `theta`.
    pub full_grad: ParamVector,
    /// Complete α row after the update.
    pub alpha_row: Vec<f64>,
    /// Auxiliary gradient the client keeps for its next momentum merge.
    /// Never uploaded.
    pub aux_grad: Option<ParamVector>,
    /// How many α updates hit the zero clamp.
    pub clamp_events: usize,
    /// How many α updates raised an entry.
    pub alpha_increases: usize,
    /// Total number of α entry updates performed.
    pub alpha_updates: usize,
}

/// Anchor-side upload computed once after local training:
/// returns `(g_α⁽¹⁾, ∇f(θ))` evaluated on the full training set.
pub fn anchor_terms(spec: &ModelSpec, data: &Dataset, theta: &ParamVector, mu: f64) -> Result<(f64, ParamVector)> {
    let (value, grad) = risk_and_grad(spec, theta, data)?;
    let g1 = g_alpha1(mu, value, &grad, theta)?;
    Ok((g1, grad))
}

/// `μ·(f − gradᵀθ)`, the part of the α-gradient owned by the anchor client.
pub fn g_alpha1(mu: f64, f_value: f64, grad: &ParamVector, theta: &ParamVector) -> Result<f64> {
    for (context, v) in [("mu", mu), ("risk value", f_value)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteScalar { context, value: v });
        }
    }
    let out = mu * (f_value - dot(grad, theta)?);
    if !out.is_finite() {
        return Err(Error::NonFiniteScalar {
            context: "g_alpha1",
            value: out,
        });
    }
    Ok(out)
}

/// The model-side α-gradient term computed exactly for one anchor:
/// `μ·∇fⱼ(θⱼ)ᵀθᵢ`. Production code replaces it with the mean-gradient estimate.
pub fn g_alpha2_exact(mu: f64, anchor_grad: &ParamVector, theta_i: &ParamVector) -> Result<f64> {
    Ok(mu * dot(anchor_grad, theta_i)?)
}

/// Momentum merge of a freshly downloaded auxiliary gradient with the one
/// retained from the last participation. Without a retained value the
/// download is used as is.
pub fn merge_aux_momentum(downloaded: &ParamVector, previous: Option<&ParamVector>, beta: f64) -> Result<ParamVector> {
    match previous {
        None => Ok(downloaded.clone()),
        Some(prev) => axpy(1.0 - beta, downloaded, &prev.scaled(beta)?),
    }
}

/// Source of the per-pair term in each α update.
#[derive(Debug, Clone, Copy)]
pub enum PairTerm<'a> {
    /// `g⁽²⁾ = ḡᵀθ` recomputed after every batch (PGFed, PGFedMo).
    MeanGradient(&'a ParamVector),
    /// `g⁽²⁾` fixed to a server-side estimate `ḡᵀθ_glob` (PGFed-CE).
    ServerConstant(f64),
    /// Exact α-gradient `μ·fⱼ(θᵢ)` from the anchors' true training sets.
    /// Simulation-only: this is the O(N²) quantity the protocol avoids.
    ExactRisk(&'a BTreeMap<usize, &'a Dataset>),
}

/// Everything a selected client receives (or holds) for a round `t > 1`.
#[derive(Debug, Clone)]
pub struct PgfedInputs<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub theta_glob: &'a ParamVector,
    pub g_tilde: &'a ParamVector,
    pub pair_term: PairTerm<'a>,
    pub g1_map: &'a BTreeMap<usize, f64>,
    pub alpha_row: &'a [f64],
    pub previous_aux: Option<&'a ParamVector>,
    pub mu: f64,
    pub eta2: f64,
    /// `Some(β)` enables the momentum merge of the auxiliary gradient.
    pub momentum_beta: Option<f64>,
}

/// PGFed client update for rounds after the first.
///
/// Every batch takes an SGD step on `∇f(θ,ℬ) + g̃`, then moves each α entry
/// keyed in `g1_map` by `−η₂·(g⁽¹⁾[j] + g⁽²⁾)` and clamps it at zero. The
/// auxiliary gradient stays fixed for the whole round.
pub fn client_update_pgfed(
    inputs: &PgfedInputs<'_>,
    schedule: &LocalSchedule,
    rng: &mut SeededRng,
) -> Result<ClientUpdatePayload> {
    let n = inputs.alpha_row.len();
    if let Some(&j) = inputs.g1_map.keys().find(|&&j| j >= n) {
        return Err(Error::InvalidArgument(format!("g1 map key {j} outside alpha row of length {n}")));
    }
    let aux = match inputs.momentum_beta {
        Some(beta) => merge_aux_momentum(inputs.g_tilde, inputs.previous_aux, beta)?,
        None => inputs.g_tilde.clone(),
    };
    let mut alpha = inputs.alpha_row.to_vec();
    let mut clamp_events = 0usize;
    let mut alpha_increases = 0usize;
    let mut alpha_updates = 0usize;
    let spec = inputs.spec;

    let theta = local_sgd(spec, inputs.data, inputs.theta_glob, schedule, rng, Some(&aux), |theta| {
        let pair_grads: Vec<(usize, f64)> = match inputs.pair_term {
            PairTerm::MeanGradient(g_bar) => {
                let g2 = dot(g_bar, theta)?;
                inputs.g1_map.iter().map(|(&j, &g1)| (j, g1 + g2)).collect()
            }
            PairTerm::ServerConstant(g2) => inputs.g1_map.iter().map(|(&j, &g1)| (j, g1 + g2)).collect(),
            PairTerm::ExactRisk(anchors) => inputs
                .g1_map
                .keys()
                .map(|&j| {
                    let data_j = anchors.get(&j).ok_or_else(|| {
                        Error::InvalidArgument(format!("exact α mode has no data for anchor {j}"))
                    })?;
                    Ok((j, inputs.mu * risk(spec, theta, data_j)?))
                })
                .collect::<Result<_>>()?,
        };
        for (j, g) in pair_grads {
            let updated = alpha[j] - inputs.eta2 * g;
            if !updated.is_finite() {
                return Err(Error::NonFiniteScalar {
                    context: "alpha update",
                    value: updated,
                });
            }
            let next = if updated < 0.0 {
                clamp_events += 1;
                0.0
            } else {
                updated
            };
            alpha_updates += 1;
            if next > alpha[j] {
                alpha_increases += 1;
            }
            alpha[j] = next;
        }
        Ok(())
    })?;

    let (g_alpha1, full_grad) = anchor_terms(spec, inputs.data, &theta, inputs.mu)?;
    Ok(ClientUpdatePayload {
        theta,
        g_alpha1,
        full_grad,
        alpha_row: alpha,
        aux_grad: Some(aux),
        clamp_events,
        alpha_increases,
        alpha_updates,
    })
}

/// A non-local risk linearized at its owner's model.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub value: f64,
    pub grad: ParamVector,
    pub theta: ParamVector,
}

impl Anchor {
    /// `fⱼ(θⱼ) + ∇fⱼ(θⱼ)ᵀ(θ − θⱼ)`.
    pub fn linearize(&self, theta: &ParamVector) -> Result<f64> {
        let step = axpy(-1.0, &self.theta, theta)?;
        Ok(self.value + dot(&self.grad, &step)?)
    }
}

/// The full first-order personalized objective
/// `fᵢ(θ) + μ·Σⱼ αᵢⱼ·(fⱼ(θⱼ) + ∇fⱼ(θⱼ)ᵀ(θ−θⱼ))`.
///
/// Diagnostic only; the federated path never materializes per-anchor terms.
/// Anchors without an α entry are skipped.
pub fn surrogate_objective(
    theta: &ParamVector,
    local_risk: impl Fn(&ParamVector) -> Result<f64>,
    alpha_row: &BTreeMap<usize, f64>,
    anchors: &BTreeMap<usize, Anchor>,
    mu: f64,
) -> Result<f64> {
    let mut aux = 0.0;
    for (j, anchor) in anchors {
        if let Some(a) = alpha_row.get(j) {
            aux += a * anchor.linearize(theta)?;
        }
    }
    Ok(local_risk(theta)? + mu * aux)
}

/// Gradient path of the explicit objective
/// `fᵢ(θ) + μ/(N−1)·Σ_{j≠i} fⱼ(θ)` with true non-local risks, by `steps`
/// full-batch gradient steps from `theta_start`. Returns `steps + 1` models,
/// starting point included.
pub fn explicit_oracle_path(
    spec: &ModelSpec,
    datasets: &[&Dataset],
    client: usize,
    theta_start: &ParamVector,
    mu: f64,
    steps: usize,
    lr: f64,
) -> Result<Vec<ParamVector>> {
    let n = datasets.len();
    if client >= n {
        return Err(Error::InvalidArgument(format!("client {client} outside federation of {n}")));
    }
    let weight = if n > 1 { mu / (n - 1) as f64 } else { 0.0 };
    let mut path = Vec::with_capacity(steps + 1);
    let mut theta = theta_start.clone();
    path.push(theta.clone());
    for _ in 0..steps {
        let mut grad = risk_grad(spec, &theta, datasets[client])?;
        if weight != 0.0 {
            for (j, data) in datasets.iter().enumerate() {
                if j != client {
                    grad.add_scaled(weight, &risk_grad(spec, &theta, data)?)?;
                }
            }
        }
        theta.add_scaled(-lr, &grad)?;
        path.push(theta.clone());
    }
    Ok(path)
}

/// Personalizes `theta_start` for every client with [`explicit_oracle_path`].
pub fn explicit_oracle_personalize(
    spec: &ModelSpec,
    datasets: &[&Dataset],
    theta_start: &ParamVector,
    mu: f64,
    steps: usize,
    lr: f64,
) -> Result<Vec<ParamVector>> {
    use rayon::prelude::*;
    (0..datasets.len())
        .into_par_iter()
        .map(|i| {
            explicit_oracle_path(spec, datasets, i, theta_start, mu, steps, lr)
                .map(|mut p| p.pop().expect("path holds the start"))
        })
        .collect()
}

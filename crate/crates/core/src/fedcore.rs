//! Server round loop, client selection and the server-side aggregates.
//!
//! A [`Federation`] owns the server state and every client's state. Each call
//! to [`Federation::run_round`] selects clients, builds the downlink messages,
//! runs the selected clients' updates (in parallel), and applies the uplinks in
//! ascending client-id order. Traffic is counted from the message objects that
//! are actually built, not from a formula.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    anchor_terms, client_update_fedavg, client_update_pgfed, explicit_oracle_personalize, fine_tune,
    local_sgd, AlgorithmTag, LocalSchedule, PairTerm, PgfedInputs,
};
use crate::datagen::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{CommLedger, RoundRecord};
use crate::models::{accuracy, risk, ModelSpec};
use crate::numerics::{dot, weighted_sum, ParamVector, SeededRng};

const TAG_SELECT: u64 = 0x005e_1ec7;
const TAG_LOCAL: u64 = 0x10ca1;
const TAG_FINETUNE: u64 = 0xf1e7;
const TAG_INIT: u64 = 0x1417;

/// Settings of the explicit (true non-local risk) personalization oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub steps: usize,
    pub mu: f64,
    pub lr: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            steps: 6,
            mu: 1.0,
            lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
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
    pub algorithm: AlgorithmTag,
    pub seed: u64,
    /// Epochs of the evaluation-time fine-tune used by `fedavg_finetune`.
    pub finetune_epochs: usize,
    pub oracle: OracleSettings,
}

impl FederationConfig {
    /// Defaults for everything but the federation size, algorithm and seed.
    pub fn new(n_clients: usize, algorithm: AlgorithmTag, seed: u64) -> Self {
        Self {
            n_clients,
            sample_rate: 0.25,
            rounds: 50,
            local_epochs: 5,
            batch_size: 32,
            eta1: 0.05,
            eta2: 0.05,
            mu: 0.01,
            beta: 0.5,
            momentum: 0.9,
            algorithm,
            seed,
            finetune_epochs: 5,
            oracle: OracleSettings::default(),
        }
    }

    /// Clients per round, `M = round(sample_rate·N)`.
    pub fn clients_per_round(&self) -> usize {
        (self.sample_rate * self.n_clients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_clients < 1 {
            return bad("n_clients must be >= 1".into());
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return bad(format!("sample_rate must be in (0,1], got {}", self.sample_rate));
        }
        if self.clients_per_round() < 1 {
            return bad(format!(
                "sample_rate {} selects no clients out of {}",
                self.sample_rate, self.n_clients
            ));
        }
        if self.rounds < 1 || self.local_epochs < 1 || self.batch_size < 1 {
            return bad("rounds, local_epochs and batch_size must be >= 1".into());
        }
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite number >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta", self.beta), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1), got {v}"));
            }
        }
        if !(self.oracle.lr >= 0.0 && self.oracle.mu >= 0.0) {
            return bad("oracle lr and mu must be >= 0".into());
        }
        Ok(())
    }

    fn schedule(&self, epochs: usize) -> LocalSchedule {
        LocalSchedule {
            epochs,
            batch_size: self.batch_size,
            lr: self.eta1,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub round: usize,
    /// Ascending client ids.
    pub selected: Vec<usize>,
}

/// Uniform sample of `m` of `n` clients without replacement, from a child RNG
/// keyed by `(seed, t)`.
pub fn select_clients(seed: u64, t: usize, n: usize, m: usize) -> Result<SelectionPlan> {
    if m < 1 || m > n {
        return Err(Error::InvalidArgument(format!("cannot select {m} of {n} clients")));
    }
    let mut rng = SeededRng::derive(seed, &[TAG_SELECT, t as u64]);
    let mut selected = rng.sample_without_replacement(n, m);
    selected.sort_unstable();
    Ok(SelectionPlan { round: t, selected })
}

/// `μ·Σⱼ αⱼ·∇fⱼ` over the keys of `grads`, in key order. Entries missing from
/// `alpha_row` use `default_alpha`.
pub fn compute_aux_grad(
    alpha_row: &[f64],
    grads: &BTreeMap<usize, ParamVector>,
    mu: f64,
    default_alpha: f64,
) -> Result<ParamVector> {
    if grads.is_empty() {
        return Err(Error::Empty("previous-round gradients"));
    }
    let vectors: Vec<&ParamVector> = grads.values().collect();
    let weights: Vec<f64> = grads
        .keys()
        .map(|&j| mu * alpha_row.get(j).copied().unwrap_or(default_alpha))
        .collect();
    weighted_sum(&vectors, &weights)
}

/// `(μ/M)·Σⱼ ∇fⱼ` with `M` the number of entries.
pub fn compute_mean_grad(grads: &BTreeMap<usize, ParamVector>, mu: f64) -> Result<ParamVector> {
    if grads.is_empty() {
        return Err(Error::Empty("previous-round gradients"));
    }
    let w = mu / grads.len() as f64;
    let vectors: Vec<&ParamVector> = grads.values().collect();
    weighted_sum(&vectors, &vec![w; vectors.len()])
}

/// `pᵢ = nᵢ / Σ nₖ` over the given clients.
pub fn aggregation_weights(n_train: &[usize]) -> Result<Vec<f64>> {
    let total: usize = n_train.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all clients report zero training samples".into()));
    }
    Ok(n_train.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `Σ pᵢθᵢ` with weights renormalized over the participating clients.
pub fn aggregate_global(clients: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    if clients.is_empty() {
        return Err(Error::Empty("aggregation set"));
    }
    let sizes: Vec<usize> = clients.iter().map(|c| c.1).collect();
    let weights = aggregation_weights(&sizes)?;
    let thetas: Vec<&ParamVector> = clients.iter().map(|c| c.0).collect();
    weighted_sum(&thetas, &weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub theta: ParamVector,
    /// Dense α row indexed by client id.
    pub alpha_row: Vec<f64>,
    /// Auxiliary gradient retained from the last participation.
    pub aux_grad: Option<ParamVector>,
    pub data: ClientDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta_glob: ParamVector,
    /// Row `i` is the last α row uploaded by client `i`.
    pub alpha: Vec<Vec<f64>>,
    pub prev_grads: BTreeMap<usize, ParamVector>,
    pub prev_g1: BTreeMap<usize, f64>,
    pub prev_selected: Vec<usize>,
    pub round: usize,
}

/// How the α-gradient is formed inside PGFed-family client updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaGradient {
    /// First-order surrogate with the mean-gradient (or server-constant) estimate.
    #[default]
    Taylor,
    /// True `μ·fⱼ(θᵢ)` from the anchors' data. Simulation-only diagnostic.
    Exact,
}

/// Server → client message of one round.
#[derive(Debug, Clone)]
pub struct Downlink {
    pub theta_glob: ParamVector,
    pub g_tilde: Option<ParamVector>,
    pub g_bar: Option<ParamVector>,
    pub g1_map: Option<BTreeMap<usize, f64>>,
    pub g2_const: Option<f64>,
}

impl Downlink {
    fn model_only(theta_glob: &ParamVector) -> Self {
        Self {
            theta_glob: theta_glob.clone(),
            g_tilde: None,
            g_bar: None,
            g1_map: None,
            g2_const: None,
        }
    }

    pub fn traffic(&self) -> CommLedger {
        let models = 1 + self.g_tilde.is_some() as u64 + self.g_bar.is_some() as u64;
        let scalars = self.g1_map.as_ref().map_or(0, |m| m.len() as u64) + self.g2_const.is_some() as u64;
        CommLedger {
            model_units_down: models,
            scalar_units_down: scalars,
            ..Default::default()
        }
    }
}

/// Client → server message of one round.
#[derive(Debug, Clone)]
pub struct Uplink {
    pub theta: ParamVector,
    pub full_grad: Option<ParamVector>,
    pub g_alpha1: Option<f64>,
    /// α entries the client touched this round.
    pub alpha_entries: Option<BTreeMap<usize, f64>>,
}

impl Uplink {
    pub fn traffic(&self) -> CommLedger {
        CommLedger {
            model_units_up: 1 + self.full_grad.is_some() as u64,
            scalar_units_up: self.g_alpha1.is_some() as u64
                + self.alpha_entries.as_ref().map_or(0, |m| m.len() as u64),
            ..Default::default()
        }
    }
}

struct ClientOutcome {
    client: usize,
    theta: ParamVector,
    aux_grad: Option<ParamVector>,
    alpha_row: Option<Vec<f64>>,
    uplink: Option<Uplink>,
    downlink_traffic: CommLedger,
    clamp_events: usize,
    alpha_increases: usize,
    alpha_updates: usize,
}

/// Summary of one executed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Traffic of this round only.
    pub traffic: CommLedger,
    pub clamp_events: usize,
    /// α updates that raised an entry.
    pub alpha_increases: usize,
    pub alpha_updates: usize,
}

#[derive(Debug, Clone)]
pub struct Federation {
    config: FederationConfig,
    model: ModelSpec,
    server: ServerState,
    clients: Vec<ClientState>,
    initial_alpha: Vec<Vec<f64>>,
    traffic: CommLedger,
    alpha_gradient: AlphaGradient,
}

impl Federation {
    /// Fresh federation: every α entry is `1/M`, every client starts from the
    /// seeded initial global model.
    pub fn new(config: FederationConfig, model: ModelSpec, data: Vec<ClientDataset>) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if data.len() != config.n_clients {
            return Err(Error::InvalidArgument(format!(
                "config has {} clients but {} datasets were given",
                config.n_clients,
                data.len()
            )));
        }
        if let Some((i, _)) = data.iter().enumerate().find(|(i, d)| d.client_id != *i) {
            return Err(Error::InvalidArgument(format!("dataset at position {i} has a different client id")));
        }
        let theta0 = model.init_params(&mut SeededRng::derive(config.seed, &[TAG_INIT]));
        let n = config.n_clients;
        let alpha0 = 1.0 / config.clients_per_round() as f64;
        let alpha = vec![vec![alpha0; n]; n];
        let clients = data
            .into_iter()
            .map(|d| ClientState {
                client_id: d.client_id,
                theta: theta0.clone(),
                alpha_row: vec![alpha0; n],
                aux_grad: None,
                data: d,
            })
            .collect();
        Ok(Self {
            server: ServerState {
                theta_glob: theta0,
                alpha: alpha.clone(),
                prev_grads: BTreeMap::new(),
                prev_g1: BTreeMap::new(),
                prev_selected: Vec::new(),
                round: 0,
            },
            initial_alpha: alpha,
            config,
            model,
            clients,
            traffic: CommLedger::default(),
            alpha_gradient: AlphaGradient::Taylor,
        })
    }

    pub fn with_alpha_gradient(mut self, mode: AlphaGradient) -> Self {
        self.alpha_gradient = mode;
        self
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn initial_alpha(&self) -> &[Vec<f64>] {
        &self.initial_alpha
    }

    /// Cumulative traffic so far.
    pub fn traffic(&self) -> CommLedger {
        self.traffic
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    /// Executes the next round.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let t = self.server.round + 1;
        let m = self.config.clients_per_round();
        let plan = select_clients(self.config.seed, t, self.config.n_clients, m)?;
        let algorithm = self.config.algorithm;

        let (g_bar, g2_const) = if algorithm.is_pgfed_family() && t > 1 {
            let g_bar = compute_mean_grad(&self.server.prev_grads, self.config.mu)?;
            let g2 = dot(&g_bar, &self.server.theta_glob)?;
            (Some(g_bar), Some(g2))
        } else {
            (None, None)
        };

        let outcomes: Vec<ClientOutcome> = plan
            .selected
            .par_iter()
            .map(|&i| {
                self.client_round(i, t, g_bar.as_ref(), g2_const)
                    .map_err(|e| Error::ClientUpdate {
                        client: i,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;

        let mut round_traffic = CommLedger::default();
        let mut next_grads = BTreeMap::new();
        let mut next_g1 = BTreeMap::new();
        let (mut clamp_events, mut alpha_increases, mut alpha_updates) = (0, 0, 0);
        // outcomes are in ascending client order
        for out in outcomes {
            round_traffic += out.downlink_traffic;
            let client = &mut self.clients[out.client];
            client.theta = out.theta;
            if out.aux_grad.is_some() {
                client.aux_grad = out.aux_grad;
            }
            if let Some(row) = out.alpha_row {
                client.alpha_row = row;
            }
            clamp_events += out.clamp_events;
            alpha_increases += out.alpha_increases;
            alpha_updates += out.alpha_updates;
            if let Some(up) = out.uplink {
                round_traffic += up.traffic();
                if let Some(entries) = &up.alpha_entries {
                    for (&j, &a) in entries {
                        self.server.alpha[out.client][j] = a;
                    }
                }
                if let Some(g) = up.full_grad {
                    next_grads.insert(out.client, g);
                }
                if let Some(g1) = up.g_alpha1 {
                    next_g1.insert(out.client, g1);
                }
            }
        }
        if clamp_events > 0 {
            debug!("round {t}: {clamp_events} alpha updates clamped at zero");
        }

        if algorithm != AlgorithmTag::Local {
            let members: Vec<(&ParamVector, usize)> = plan
                .selected
                .iter()
                .map(|&i| (&self.clients[i].theta, self.clients[i].data.n_train()))
                .collect();
            self.server.theta_glob = aggregate_global(&members)?;
        }
        if algorithm.is_pgfed_family() {
            self.server.prev_grads = next_grads;
            self.server.prev_g1 = next_g1;
        }
        self.server.prev_selected = plan.selected.clone();
        self.server.round = t;
        self.traffic += round_traffic;

        Ok(RoundOutcome {
            round: t,
            selected: plan.selected,
            traffic: round_traffic,
            clamp_events,
            alpha_increases,
            alpha_updates,
        })
    }

    fn local_rng(&self, t: usize, client: usize) -> SeededRng {
        SeededRng::derive(self.config.seed, &[TAG_LOCAL, t as u64, client as u64])
    }

    fn client_round(&self, i: usize, t: usize, g_bar: Option<&ParamVector>, g2_const: Option<f64>) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let client = &self.clients[i];
        let data = &client.data.train;
        let schedule = cfg.schedule(cfg.local_epochs);
        let mut rng = self.local_rng(t, i);
        let algorithm = cfg.algorithm;
        let mut outcome = ClientOutcome {
            client: i,
            theta: client.theta.clone(),
            aux_grad: None,
            alpha_row: None,
            uplink: None,
            downlink_traffic: CommLedger::default(),
            clamp_events: 0,
            alpha_increases: 0,
            alpha_updates: 0,
        };

        if algorithm == AlgorithmTag::Local {
            outcome.theta = local_sgd(&self.model, data, &client.theta, &schedule, &mut rng, None, |_| Ok(()))?;
            return Ok(outcome);
        }

        if algorithm.trains_like_fedavg() || t == 1 {
            let down = Downlink::model_only(&self.server.theta_glob);
            outcome.downlink_traffic = down.traffic();
            let theta = client_update_fedavg(&self.model, data, &down.theta_glob, &schedule, &mut rng)?;
            let uplink = if algorithm.is_pgfed_family() {
                let (g1, grad) = anchor_terms(&self.model, data, &theta, cfg.mu)?;
                Uplink {
                    theta: theta.clone(),
                    full_grad: Some(grad),
                    g_alpha1: Some(g1),
                    alpha_entries: Some(BTreeMap::new()),
                }
            } else {
                Uplink {
                    theta: theta.clone(),
                    full_grad: None,
                    g_alpha1: None,
                    alpha_entries: None,
                }
            };
            outcome.theta = theta;
            outcome.uplink = Some(uplink);
            return Ok(outcome);
        }

        // PGFed family, t > 1
        let default_alpha = 1.0 / cfg.clients_per_round() as f64;
        let g_tilde = compute_aux_grad(&self.server.alpha[i], &self.server.prev_grads, cfg.mu, default_alpha)?;
        let g_bar = g_bar.ok_or(Error::Empty("mean gradient for round > 1"))?;
        let g2_const = g2_const.ok_or(Error::Empty("server g2 estimate for round > 1"))?;
        let down = Downlink {
            theta_glob: self.server.theta_glob.clone(),
            g_tilde: Some(g_tilde),
            g_bar: (algorithm != AlgorithmTag::PgfedCe).then(|| g_bar.clone()),
            g1_map: Some(self.server.prev_g1.clone()),
            g2_const: (algorithm == AlgorithmTag::PgfedCe).then_some(g2_const),
        };
        outcome.downlink_traffic = down.traffic();

        let anchors: BTreeMap<usize, &Dataset>;
        let pair_term = match (self.alpha_gradient, &down.g_bar, down.g2_const) {
            (AlphaGradient::Exact, _, _) => {
                anchors = self.server.prev_g1.keys().map(|&j| (j, &self.clients[j].data.train)).collect();
                PairTerm::ExactRisk(&anchors)
            }
            (AlphaGradient::Taylor, Some(g), _) => PairTerm::MeanGradient(g),
            (AlphaGradient::Taylor, None, Some(c)) => PairTerm::ServerConstant(c),
            (AlphaGradient::Taylor, None, None) => unreachable!("downlink carries one g2 source"),
        };
        let g1_map = down.g1_map.as_ref().expect("pgfed downlink carries g1");
        let inputs = PgfedInputs {
            spec: &self.model,
            data,
            theta_glob: &down.theta_glob,
            g_tilde: down.g_tilde.as_ref().expect("pgfed downlink carries g_tilde"),
            pair_term,
            g1_map,
            alpha_row: &client.alpha_row,
            previous_aux: client.aux_grad.as_ref(),
            mu: cfg.mu,
            eta2: cfg.eta2,
            momentum_beta: (algorithm == AlgorithmTag::Pgfedmo).then_some(cfg.beta),
        };
        let payload = client_update_pgfed(&inputs, &schedule, &mut rng)?;
        let entries: BTreeMap<usize, f64> = g1_map.keys().map(|&j| (j, payload.alpha_row[j])).collect();
        outcome.theta = payload.theta.clone();
        outcome.aux_grad = payload.aux_grad;
        outcome.clamp_events = payload.clamp_events;
        outcome.alpha_increases = payload.alpha_increases;
        outcome.alpha_updates = payload.alpha_updates;
        outcome.alpha_row = Some(payload.alpha_row);
        outcome.uplink = Some(Uplink {
            theta: payload.theta,
            full_grad: Some(payload.full_grad),
            g_alpha1: Some(payload.g_alpha1),
            alpha_entries: Some(entries),
        });
        Ok(outcome)
    }

    /// Each client's personalized model under the configured algorithm.
    ///
    /// `fedavg_finetune` fine-tunes the current global model on every client;
    /// `explicit_oracle` personalizes it with true non-local risks; every
    /// other algorithm uses the client's own latest model.
    pub fn personalized_models(&self) -> Result<Vec<ParamVector>> {
        let cfg = &self.config;
        match cfg.algorithm {
            AlgorithmTag::FedavgFinetune => {
                let schedule = cfg.schedule(cfg.finetune_epochs);
                self.clients
                    .par_iter()
                    .map(|c| {
                        let mut rng = SeededRng::derive(
                            cfg.seed,
                            &[TAG_FINETUNE, self.server.round as u64, c.client_id as u64],
                        );
                        fine_tune(&self.model, &c.data.train, &self.server.theta_glob, &schedule, &mut rng)
                    })
                    .collect()
            }
            AlgorithmTag::ExplicitOracle => {
                let sets: Vec<&Dataset> = self.clients.iter().map(|c| &c.data.train).collect();
                let o = cfg.oracle;
                explicit_oracle_personalize(&self.model, &sets, &self.server.theta_glob, o.mu, o.steps, o.lr)
            }
            _ => Ok(self.clients.iter().map(|c| c.theta.clone()).collect()),
        }
    }

    /// Evaluates every client's personalized model on its test split.
    pub fn evaluate(&self) -> Result<RoundRecord> {
        let models = self.personalized_models()?;
        let scores: Vec<(usize, f64, f64)> = self
            .clients
            .par_iter()
            .zip(&models)
            .map(|(c, theta)| {
                Ok((
                    c.client_id,
                    accuracy(&self.model, theta, &c.data.test)?,
                    risk(&self.model, theta, &c.data.train)?,
                ))
            })
            .collect::<Result<_>>()?;
        let acc = scores.iter().map(|s| (s.0, s.1)).collect();
        let loss = scores.iter().map(|s| (s.0, s.2)).collect();
        Ok(RoundRecord::new(self.server.round, acc, loss, self.traffic))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.server;
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            algorithm: self.config.algorithm,
            seed: self.config.seed,
            round: s.round,
            theta_glob: encode_f64s(s.theta_glob.as_slice()),
            alpha: s.alpha.iter().map(|r| encode_f64s(r)).collect(),
            initial_alpha: self.initial_alpha.iter().map(|r| encode_f64s(r)).collect(),
            prev_selected: s.prev_selected.clone(),
            prev_grads: s.prev_grads.iter().map(|(&j, g)| (j, encode_f64s(g.as_slice()))).collect(),
            prev_g1: s.prev_g1.iter().map(|(&j, &v)| (j, encode_scalar(v))).collect(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientCheckpoint {
                    theta: encode_f64s(c.theta.as_slice()),
                    alpha_row: encode_f64s(&c.alpha_row),
                    aux_grad: c.aux_grad.as_ref().map(|g| encode_f64s(g.as_slice())),
                })
                .collect(),
            traffic: self.traffic,
        }
    }

    /// Rebuilds a federation from a checkpoint and the same data and config
    /// it was taken from. Later rounds reproduce the uninterrupted run exactly.
    pub fn restore(
        config: FederationConfig,
        model: ModelSpec,
        data: Vec<ClientDataset>,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", checkpoint.format)));
        }
        if checkpoint.algorithm != config.algorithm || checkpoint.seed != config.seed {
            return Err(Error::Checkpoint("checkpoint algorithm or seed differs from config".into()));
        }
        let mut fed = Self::new(config, model, data)?;
        let n = fed.config.n_clients;
        let d = model.dim();
        let vector = |s: &str| -> Result<ParamVector> {
            let v = decode_f64s(s)?;
            if v.len() != d {
                return Err(Error::Checkpoint(format!("vector of length {} where {d} expected", v.len())));
            }
            ParamVector::new(v)
        };
        let row = |s: &str| -> Result<Vec<f64>> {
            let v = decode_f64s(s)?;
            if v.len() != n {
                return Err(Error::Checkpoint(format!("alpha row of length {} where {n} expected", v.len())));
            }
            Ok(v)
        };
        if checkpoint.alpha.len() != n || checkpoint.clients.len() != n || checkpoint.initial_alpha.len() != n {
            return Err(Error::Checkpoint("client count differs from config".into()));
        }
        fed.server = ServerState {
            theta_glob: vector(&checkpoint.theta_glob)?,
            alpha: checkpoint.alpha.iter().map(|r| row(r)).collect::<Result<_>>()?,
            prev_grads: checkpoint
                .prev_grads
                .iter()
                .map(|(&j, g)| Ok((j, vector(g)?)))
                .collect::<Result<_>>()?,
            prev_g1: checkpoint
                .prev_g1
                .iter()
                .map(|(&j, v)| Ok((j, decode_scalar(v)?)))
                .collect::<Result<_>>()?,
            prev_selected: checkpoint.prev_selected.clone(),
            round: checkpoint.round,
        };
        fed.initial_alpha = checkpoint.initial_alpha.iter().map(|r| row(r)).collect::<Result<_>>()?;
        for (client, saved) in fed.clients.iter_mut().zip(&checkpoint.clients) {
            client.theta = vector(&saved.theta)?;
            client.alpha_row = row(&saved.alpha_row)?;
            client.aux_grad = saved.aux_grad.as_deref().map(vector).transpose()?;
        }
        fed.traffic = checkpoint.traffic;
        Ok(fed)
    }
}

pub const CHECKPOINT_FORMAT: &str = "pgfed-checkpoint/1";

/// Serialized engine state.
///
/// JSON document whose real-valued payloads are binary: vectors are base64 of
/// little-endian IEEE-754 doubles, scalars are the 16-hex-digit bit pattern.
/// This keeps reloads bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub algorithm: AlgorithmTag,
    pub seed: u64,
    pub round: usize,
    pub theta_glob: String,
    pub alpha: Vec<String>,
    pub initial_alpha: Vec<String>,
    pub prev_selected: Vec<usize>,
    pub prev_grads: BTreeMap<usize, String>,
    pub prev_g1: BTreeMap<usize, String>,
    pub clients: Vec<ClientCheckpoint>,
    pub traffic: CommLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientCheckpoint {
    pub theta: String,
    pub alpha_row: String,
    pub aux_grad: Option<String>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(encoded: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(encoded)
        .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn encode_scalar(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn decode_scalar(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Checkpoint(format!("bad scalar {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn selection_cases() {
        assert_eq!(select_clients(1, 3, 4, 4).unwrap().selected, vec![0, 1, 2, 3]);
        let one = select_clients(1, 3, 9, 1).unwrap();
        assert_eq!(one.selected.len(), 1);
        assert!(one.selected[0] < 9);
        assert_eq!(select_clients(5, 7, 100, 25).unwrap(), select_clients(5, 7, 100, 25).unwrap());
        assert_ne!(select_clients(5, 7, 100, 25).unwrap().selected, select_clients(5, 8, 100, 25).unwrap().selected);
        assert!(select_clients(1, 1, 3, 4).is_err());
        let plan = select_clients(2, 2, 50, 20).unwrap();
        let mut dedup = plan.selected.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 20);
    }

    #[test]
    fn aux_grad_cases() {
        let grads: BTreeMap<usize, ParamVector> = [(0, pv(&[1.0, 0.0])), (1, pv(&[0.0, 2.0]))].into();
        let out = compute_aux_grad(&[0.2, 0.3], &grads, 0.1, 0.5).unwrap();
        assert!((out.as_slice()[0] - 0.02).abs() < 1e-15);
        assert!((out.as_slice()[1] - 0.06).abs() < 1e-15);
        assert_eq!(compute_aux_grad(&[0.2, 0.3], &grads, 0.0, 0.5).unwrap(), ParamVector::zeros(2));

        let g = pv(&[0.4, -1.2, 3.0]);
        let same: BTreeMap<usize, ParamVector> = (0..4).map(|j| (j, g.clone())).collect();
        let out = compute_aux_grad(&[0.25; 4], &same, 0.3, 0.25).unwrap();
        for (a, b) in out.as_slice().iter().zip(g.as_slice()) {
            assert!((a - 0.3 * b).abs() < 1e-15);
        }
        // unseen pair falls back to the default
        let far: BTreeMap<usize, ParamVector> = [(7, pv(&[1.0, 1.0]))].into();
        assert_eq!(compute_aux_grad(&[0.2], &far, 1.0, 0.5).unwrap(), pv(&[0.5, 0.5]));
        assert!(compute_aux_grad(&[0.1], &BTreeMap::new(), 1.0, 0.5).is_err());
    }

    #[test]
    fn mean_grad_cases() {
        let g = pv(&[1.5, -2.0]);
        let single: BTreeMap<usize, ParamVector> = [(3, g.clone())].into();
        assert_eq!(compute_mean_grad(&single, 1.0).unwrap(), g);
        let neg = g.scaled(-1.0).unwrap();
        let pair: BTreeMap<usize, ParamVector> = [(0, g.clone()), (1, neg)].into();
        assert_eq!(compute_mean_grad(&pair, 0.7).unwrap(), ParamVector::zeros(2));
        assert!(compute_mean_grad(&BTreeMap::new(), 1.0).is_err());

        let mut rng = SeededRng::new(3);
        let grads: BTreeMap<usize, ParamVector> = (0..3)
            .map(|j| (j, ParamVector::new((0..5).map(|_| rng.normal()).collect()).unwrap()))
            .collect();
        let out = compute_mean_grad(&grads, 0.01).unwrap();
        for k in 0..5 {
            let mut s = 0.0;
            for g in grads.values() {
                s += g.as_slice()[k];
            }
            assert!((out.as_slice()[k] - 0.01 * s / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_cases() {
        let v = pv(&[0.3, -4.0]);
        assert_eq!(aggregate_global(&[(&v, 7)]).unwrap(), v);
        let a = pv(&[0.0, 0.0]);
        let b = pv(&[2.0, 2.0]);
        assert_eq!(aggregate_global(&[(&a, 5), (&b, 5)]).unwrap(), pv(&[1.0, 1.0]));
        let out = aggregate_global(&[(&v, 3), (&v, 9), (&v, 1)]).unwrap();
        for (x, y) in out.as_slice().iter().zip(v.as_slice()) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs());
        }
        assert!(aggregate_global(&[(&v, 0)]).is_err());
        let w = aggregation_weights(&[3, 9, 1, 17]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_and_vector_codecs_are_bit_exact() {
        let values = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25];
        assert_eq!(
            decode_f64s(&encode_f64s(&values)).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for v in values {
            assert_eq!(decode_scalar(&encode_scalar(v)).unwrap().to_bits(), v.to_bits());
        }
        assert!(decode_f64s("not base64!").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FederationConfig::new(100, AlgorithmTag::Pgfed, 0);
        assert_eq!(cfg.clients_per_round(), 25);
        assert!(cfg.validate().is_ok());
        cfg.beta = 1.5;
        assert!(cfg.validate().is_err());
        cfg.beta = 0.5;
        cfg.sample_rate = 0.001;
        assert!(cfg.validate().is_err());
    }
}

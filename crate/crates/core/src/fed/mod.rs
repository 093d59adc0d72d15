//! Federated rounds: local training with optional control-variate or
//! proximal corrections, server aggregation and communication accounting.

mod eval;
mod sim;

pub use eval::{evaluate, EvalResult};
pub use sim::{centralized_curve, Federation};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::ByteCounts;
use crate::nn::{cosine_lr, sgd_step, sgd_step_tracked, Mode, Network};
use crate::tensor::{ParamSet, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedProx,
    FedNova,
    Scaffold,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedAvg, Strategy::FedProx, Strategy::FedNova, Strategy::Scaffold];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedNova => "fednova",
            Strategy::Scaffold => "scaffold",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Step count used to turn the local model drift into a control variate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlDenominator {
    /// `E * lr`, one unit per local epoch.
    #[default]
    Epochs,
    /// `steps * lr`, one unit per local minibatch step.
    TotalSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub strategy: Strategy,
    pub dynamic_pruning: bool,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate over each round's local epochs;
    /// constant `lr` when false.
    pub cosine_lr: bool,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub sample_rate: f64,
    /// Proximal coefficient for FedProx.
    pub mu: f64,
    pub control_denominator: ControlDenominator,
    /// Keep both control variates at zero (SCAFFOLD then trains like FedAvg).
    pub freeze_control_variates: bool,
    /// Wire format used for byte accounting.
    pub precision: Precision,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Scaffold,
            dynamic_pruning: true,
            rounds: 50,
            local_epochs: 2,
            lr: 0.1,
            cosine_lr: true,
            batch_size: 16,
            weight_decay: 5e-4,
            sample_rate: 1.0,
            mu: 0.01,
            control_denominator: ControlDenominator::Epochs,
            freeze_control_variates: false,
            precision: Precision::F32,
        }
    }
}

impl FlConfig {
    /// All violations, each prefixed with its field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            v.push(format!("sample_rate: must be in (0, 1], got {}", self.sample_rate));
        }
        if self.local_epochs == 0 {
            v.push("local_epochs: must be at least 1".into());
        }
        if self.rounds == 0 {
            v.push("rounds: must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size: must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            v.push(format!("mu: must be >= 0, got {}", self.mu));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    fn uses_variates(&self) -> bool {
        self.strategy == Strategy::Scaffold && !self.freeze_control_variates
    }
}

/// A deterministic sub-seed of `seed` for an independent purpose.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const MODEL_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const CLIENT_STREAM: u64 = 1 << 20;
const GATE_STREAM: u64 = 2 << 20;

/// Seed of the initial global backbone.
pub fn model_seed(seed: u64) -> u64 {
    sub_seed(seed, MODEL_STREAM)
}

/// Batch-order stream of client `id`.
pub fn client_rng(seed: u64, id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, CLIENT_STREAM + id as u64))
}

pub fn gate_seed(seed: u64, id: usize) -> u64 {
    sub_seed(seed, GATE_STREAM + id as u64)
}

/// Loss and gradients of a local objective on one minibatch.
pub trait Objective: Sync {
    /// Accumulates gradients of the loss on `batch` into `params` (and
    /// `gates`, when given) and returns the loss.
    fn loss_and_grad(&self, params: &mut ParamSet, gates: Option<&mut ParamSet>, batch: &[usize]) -> Result<f64>;
}

/// Cross-entropy (plus gate Lasso when gated) of a network on a dataset.
pub struct NetObjective<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
}

impl Objective for NetObjective<'_> {
    fn loss_and_grad(&self, params: &mut ParamSet, gates: Option<&mut ParamSet>, batch: &[usize]) -> Result<f64> {
        let (x, y) = self.data.batch(batch);
        let mut f = self.net.forward(params, gates.as_deref(), &x, Mode::Train)?;
        let loss = f.loss(self.net, &y)?;
        self.net.backward(&mut f.tape, 1.0, params, gates)?;
        Ok(loss.total)
    }
}

pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Local control variate.
    pub c_l: ParamSet,
    /// Gate parameters; they never leave the client.
    pub gates: Option<ParamSet>,
    pub rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(id: usize, train: Vec<usize>, validation: Vec<usize>, template: &ParamSet, gates: Option<ParamSet>, seed: u64) -> Self {
        Self {
            id,
            train,
            validation,
            c_l: template.zeros_like(),
            gates,
            rng: client_rng(seed, id),
        }
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientReturn {
    pub id: usize,
    /// Local model after training.
    pub weights: ParamSet,
    /// Control-variate change; all zero unless control variates are in use.
    pub c_delta: ParamSet,
    pub num_samples: usize,
    /// Local SGD steps taken.
    pub steps: usize,
    pub mean_loss: f64,
}

impl ClientReturn {
    /// `w_k - w_t`.
    pub fn delta(&self, w_t: &ParamSet) -> Result<ParamSet> {
        self.weights.sub(w_t)
    }
}

/// Gradient addend `mu * (w - w_t)` of the proximal term.
pub fn fedprox_correction(w: &ParamSet, w_t: &ParamSet, mu: f64) -> Result<ParamSet> {
    let mut d = w.sub(w_t)?;
    d.scale_in_place(mu);
    Ok(d)
}

/// Local training of one client for one round.
pub fn client_update(
    client: &mut ClientState,
    round: usize,
    w_t: &ParamSet,
    c_g: &ParamSet,
    cfg: &FlConfig,
    objective: &dyn Objective,
) -> Result<ClientReturn> {
    if client.train.is_empty() {
        return Err(Error::Config(format!("client {} has an empty training shard", client.id)));
    }
    w_t.check_structure(&client.c_l)?;
    let correction = if cfg.uses_variates() {
        let mut c = c_g.sub(&client.c_l)?;
        c.zero_buffers();
        Some(c)
    } else {
        None
    };
    let mut w = w_t.clone();
    // Sum of the applied steps, i.e. w_t - w_k without the cancellation of
    // subtracting two nearby models.
    let mut travel = w_t.zeros_like();
    let mut steps = 0;
    let mut loss_sum = 0.0;
    let mut order = client.train.clone();
    for epoch in 0..cfg.local_epochs {
        let lr = if cfg.cosine_lr {
            cosine_lr(cfg.lr, epoch, cfg.local_epochs)
        } else {
            cfg.lr
        };
        order.shuffle(&mut client.rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "round {round}, client {}, epoch {epoch}, batch {b}: {m}",
                    client.id
                )),
                other => other,
            };
            w.zero_grad();
            if let Some(g) = client.gates.as_mut() {
                g.zero_grad();
            }
            let loss = objective
                .loss_and_grad(&mut w, client.gates.as_mut(), batch)
                .map_err(context)?;
            if !loss.is_finite() {
                return Err(context(Error::Numeric("loss is not finite".into())));
            }
            loss_sum += loss;
            match cfg.strategy {
                Strategy::FedProx => {
                    let prox = fedprox_correction(&w, w_t, cfg.mu)?;
                    sgd_step_tracked(&mut w, lr, cfg.weight_decay, Some(&prox), Some(&mut travel))?;
                }
                _ => sgd_step_tracked(&mut w, lr, cfg.weight_decay, correction.as_ref(), Some(&mut travel))?,
            }
            if let Some(g) = client.gates.as_mut() {
                sgd_step(g, lr, cfg.weight_decay, None)?;
            }
            if !w.all_finite() {
                return Err(context(Error::Numeric("parameters diverged".into())));
            }
            steps += 1;
        }
    }
    let c_delta = if cfg.uses_variates() {
        let units = match cfg.control_denominator {
            ControlDenominator::Epochs => cfg.local_epochs,
            ControlDenominator::TotalSteps => steps,
        };
        // c_l* = c_l - c_g + (w_t - w_k) / (units * lr); the change is c_l* - c_l.
        let denom = units as f64 * cfg.lr;
        let mut c_star = client.c_l.sub(c_g)?;
        for (i, (_, p)) in c_star.iter_mut().enumerate() {
            for (c, t) in p.value.data_mut().iter_mut().zip(travel.param(i).value.data()) {
                *c += t / denom;
            }
        }
        let mut c_delta = c_star.sub(&client.c_l)?;
        c_delta.zero_buffers();
        client.c_l.add_assign(&c_delta)?;
        c_delta
    } else {
        w_t.zeros_like()
    };
    Ok(ClientReturn {
        id: client.id,
        weights: w,
        c_delta,
        num_samples: client.train.len(),
        steps,
        mean_loss: loss_sum / steps as f64,
    })
}

/// Number of clients taking part in each round.
pub fn clients_per_round(num_clients: usize, sample_rate: f64) -> usize {
    ((sample_rate * num_clients as f64 - 1e-9).ceil() as usize).min(num_clients)
}

pub struct ServerState {
    pub w: ParamSet,
    /// Global control variate.
    pub c_g: ParamSet,
    pub round: usize,
    pub num_clients: usize,
    rng: ChaCha8Rng,
}

impl ServerState {
    pub fn new(w: ParamSet, num_clients: usize, seed: u64) -> Self {
        Self {
            c_g: w.zeros_like(),
            w,
            round: 0,
            num_clients,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, SAMPLING_STREAM)),
        }
    }

    /// Sorted ids of this round's participants.
    pub fn sample(&mut self, sample_rate: f64) -> Result<Vec<usize>> {
        let m = clients_per_round(self.num_clients, sample_rate);
        if m == 0 {
            return Err(Error::Config("sample_rate selects no clients".into()));
        }
        let mut ids = rand::seq::index::sample(&mut self.rng, self.num_clients, m).into_vec();
        ids.sort_unstable();
        Ok(ids)
    }
}

/// `anchor + sum_k p_k (w_k - anchor)` with the first model as anchor, which
/// equals `w_t + sum_k p_k (w_k - w_t)` and is exact for a single client or
/// when no client moved.
pub fn weighted_average(models: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let anchor = models
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    let mut out = (*anchor).clone();
    for (m, &p) in models.iter().zip(weights).skip(1) {
        out.axpy(p, &m.sub(anchor)?)?;
    }
    Ok(out)
}

/// Normalized averaging: `tau_eff * sum_k p_k delta_k / tau_k` with
/// `tau_eff = sum_k p_k tau_k`.
pub fn fednova_aggregate(deltas: &[&ParamSet], taus: &[usize], weights: &[f64]) -> Result<ParamSet> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if taus.contains(&0) {
        return Err(Error::Config("local step counts must be at least 1".into()));
    }
    let tau_eff: f64 = weights.iter().zip(taus).map(|(p, &t)| p * t as f64).sum();
    let mut out = first.zeros_like();
    for ((d, &t), &p) in deltas.iter().zip(taus).zip(weights) {
        out.axpy(tau_eff * p / t as f64, d)?;
    }
    Ok(out)
}

/// `c_g <- c_g + (1/N) * sum_k c_delta_k`, summed in the given order.
pub fn update_control(c_g: &mut ParamSet, c_deltas: &[&ParamSet], num_clients: usize) -> Result<()> {
    let mut sum = c_g.zeros_like();
    for d in c_deltas {
        sum.add_assign(d)?;
    }
    c_g.axpy(1.0 / num_clients as f64, &sum)
}

/// Result of one server round.
pub struct RoundOutcome {
    pub sampled: Vec<usize>,
    pub mean_loss: f64,
    /// Bytes moved in this round only.
    pub bytes: ByteCounts,
}

/// One round: sample, train the sampled clients (in parallel), aggregate in
/// ascending client order.
pub fn server_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FlConfig,
    objective: &dyn Objective,
) -> Result<RoundOutcome> {
    if clients.len() != server.num_clients {
        return Err(Error::Config(format!(
            "{} client states for {} clients",
            clients.len(),
            server.num_clients
        )));
    }
    let sampled = server.sample(cfg.sample_rate)?;
    let round = server.round + 1;
    let (w_t, c_g) = (&server.w, &server.c_g);
    let mut picked: Vec<&mut ClientState> = clients.iter_mut().filter(|c| sampled.binary_search(&c.id).is_ok()).collect();
    let results: Vec<Result<ClientReturn>> = picked
        .par_iter_mut()
        .map(|c| client_update(c, round, w_t, c_g, cfg, objective))
        .collect();
    let returns = results.into_iter().collect::<Result<Vec<_>>>()?;

    let total: usize = returns.iter().map(|r| r.num_samples).sum();
    let p: Vec<f64> = returns.iter().map(|r| r.num_samples as f64 / total as f64).collect();
    let taus: Vec<usize> = returns.iter().map(|r| r.steps).collect();
    let new_w = if cfg.strategy == Strategy::FedNova && taus.iter().any(|&t| t != taus[0]) {
        let deltas = returns.iter().map(|r| r.delta(&server.w)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ParamSet> = deltas.iter().collect();
        server.w.add(&fednova_aggregate(&refs, &taus, &p)?)?
    } else {
        let models: Vec<&ParamSet> = returns.iter().map(|r| &r.weights).collect();
        weighted_average(&models, &p)?
    };
    if !new_w.all_finite() {
        return Err(Error::Numeric(format!("round {round}: aggregated model is not finite")));
    }
    if cfg.uses_variates() {
        let deltas: Vec<&ParamSet> = returns.iter().map(|r| &r.c_delta).collect();
        update_control(&mut server.c_g, &deltas, server.num_clients)?;
    }
    server.w = new_w;
    server.round = round;

    let m = returns.len() as u64;
    let wbytes = server.w.encoded_len(cfg.precision) as u64;
    let vbytes = if cfg.uses_variates() { wbytes } else { 0 };
    let bytes = ByteCounts {
        up_weights: m * wbytes,
        up_variates: m * vbytes,
        down_weights: m * wbytes,
        down_variates: m * vbytes,
        up_gates: 0,
        down_gates: 0,
    };
    let mean_loss = returns.iter().map(|r| r.mean_loss).sum::<f64>() / m as f64;
    Ok(RoundOutcome {
        sampled,
        mean_loss,
        bytes,
    })
}

use std::time::Instant;

use super::{evaluate, gate_seed, model_seed, server_round, ClientState, EvalResult, FlConfig, NetObjective, ServerState};
use crate::data::{LabeledDataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{ByteCounts, RoundMetrics};
use crate::nn::Network;

const EVAL_BATCH: usize = 64;

/// A full federated run over one network, dataset and partition.
pub struct Federation<'a> {
    net: &'a Network,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    cfg: FlConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    bytes: ByteCounts,
}

impl<'a> Federation<'a> {
    /// Initial weights depend only on `seed` and the network, so runs that
    /// differ in strategy start from the same model.
    pub fn new(
        net: &'a Network,
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        partition: &Partition,
        cfg: FlConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.dynamic_pruning != net.is_gated() {
            return Err(Error::Config(
                "dynamic_pruning must match whether the network has gates".into(),
            ));
        }
        partition.check(train.len())?;
        let w = net.init_params(model_seed(seed));
        let clients = partition
            .clients
            .iter()
            .map(|c| {
                let gates = cfg.dynamic_pruning.then(|| net.init_gates(gate_seed(seed, c.id)));
                ClientState::new(c.id, c.train.clone(), c.validation.clone(), &w, gates, seed)
            })
            .collect::<Vec<_>>();
        Ok(Self {
            net,
            train,
            test,
            server: ServerState::new(w, clients.len(), seed),
            clients,
            cfg,
            bytes: ByteCounts::default(),
        })
    }

    pub fn config(&self) -> &FlConfig {
        &self.cfg
    }

    /// Cumulative bytes so far.
    pub fn bytes(&self) -> ByteCounts {
        self.bytes
    }

    /// Trains one round and evaluates the new global model.
    pub fn round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let objective = NetObjective {
            net: self.net,
            data: self.train,
        };
        let out = server_round(&mut self.server, &mut self.clients, &self.cfg, &objective)?;
        let b = &mut self.bytes;
        b.up_weights += out.bytes.up_weights;
        b.up_variates += out.bytes.up_variates;
        b.down_weights += out.bytes.down_weights;
        b.down_variates += out.bytes.down_variates;
        let (client_top1, pooled) = self.local_accuracy()?;
        let global = self.global_accuracy()?;
        Ok(RoundMetrics {
            round: self.server.round,
            avg_local_top1: pooled.accuracy(),
            global_top1: global.accuracy(),
            client_top1,
            bytes: self.bytes,
            flops_per_sample: global.flops_per_sample(),
            sparsity: global.sparsity(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Per-client accuracy on local validation data (training data for a
    /// client without a validation slice) and the pooled result.
    pub fn local_accuracy(&self) -> Result<(Vec<f64>, EvalResult)> {
        let mut pooled = EvalResult::default();
        let mut per = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let idx = if c.validation.is_empty() { &c.train } else { &c.validation };
            let r = evaluate(self.net, &self.server.w, c.gates.as_ref(), self.train, idx, EVAL_BATCH)?;
            per.push(r.accuracy());
            pooled.merge(&r);
        }
        Ok((per, pooled))
    }

    /// Accuracy on the shared test set. With gates, test sample `i` goes
    /// through client `i mod N`'s gates, so the result estimates the mean
    /// over clients at the cost of one pass.
    pub fn global_accuracy(&self) -> Result<EvalResult> {
        let n = self.test.len();
        if !self.cfg.dynamic_pruning {
            let all: Vec<usize> = (0..n).collect();
            return evaluate(self.net, &self.server.w, None, self.test, &all, EVAL_BATCH);
        }
        let k = self.clients.len();
        let mut total = EvalResult::default();
        for (j, c) in self.clients.iter().enumerate() {
            let idx: Vec<usize> = (j..n).step_by(k).collect();
            if idx.is_empty() {
                continue;
            }
            let r = evaluate(self.net, &self.server.w, c.gates.as_ref(), self.test, &idx, EVAL_BATCH)?;
            total.merge(&r);
        }
        Ok(total)
    }
}

/// Trains one model on the pooled `train_idx` for `epochs` epochs (FedAvg
/// local training on a single client holding everything) and returns the
/// accuracy on `eval_idx` after each epoch.
pub fn centralized_curve(
    net: &Network,
    data: &LabeledDataset,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &FlConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = FlConfig {
        strategy: super::Strategy::FedAvg,
        local_epochs: 1,
        cosine_lr: false,
        ..cfg.clone()
    };
    let mut w = net.init_params(model_seed(seed));
    let gates = cfg.dynamic_pruning.then(|| net.init_gates(gate_seed(seed, 0)));
    let mut client = ClientState::new(0, train_idx.to_vec(), vec![], &w, gates, seed);
    let zero = w.zeros_like();
    let objective = NetObjective { net, data };
    (1..=epochs)
        .map(|epoch| {
            w = super::client_update(&mut client, epoch, &w, &zero, &cfg, &objective)?.weights;
            Ok(evaluate(net, &w, client.gates.as_ref(), data, eval_idx, EVAL_BATCH)?.accuracy())
        })
        .collect()
}

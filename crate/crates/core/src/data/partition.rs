use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Redraws allowed when a draw leaves some client without training data.
pub const MAX_RETRIES: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration; small values give skewed label mixes.
    pub beta: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_clients: 8,
            beta: 0.1,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    /// Draw that produced this partition (0 unless earlier draws were rejected).
    pub attempt: u64,
    pub clients: Vec<ClientSplit>,
}

impl Partition {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    /// Hex SHA-256 of [`Partition::to_json`].
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Checks that the lists are disjoint, cover `0..n` and leave every
    /// client some training data.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for c in &self.clients {
            if c.train.is_empty() {
                return Err(Error::Partition(format!("client {} has no training samples", c.id)));
            }
            for &i in c.train.iter().chain(&c.validation) {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} out of range or assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {i} assigned to no client")));
        }
        Ok(())
    }
}

/// Sizes proportional to `weights` summing exactly to `total`: floors, then
/// the leftover units go to the largest fractional parts (lowest index on
/// ties).
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().take(total.saturating_sub(assigned)) {
        sizes[j] += 1;
    }
    sizes
}

/// Label-skewed split: for each class (ascending), shuffle its indices, draw
/// proportions from Dirichlet(beta) as normalized Gamma(beta, 1) variates and
/// hand out contiguous blocks. Each client's pool is then shuffled and its
/// first `floor(validation_fraction * len)` indices become validation data.
///
/// Draw `a` uses the ChaCha8 stream `a` of the seed; a draw that leaves any
/// client without training samples (or whose Gamma variates all vanish) is
/// rejected, up to [`MAX_RETRIES`] redraws.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let gamma = Gamma::new(spec.beta, 1.0).map_err(|e| Error::Config(format!("beta: {e}")))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    'attempt: for attempt in 0..=MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
        for members in &by_class {
            let mut idx = members.clone();
            idx.shuffle(&mut rng);
            let draws: Vec<f64> = (0..spec.num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            if !(sum > 0.0 && sum.is_finite()) {
                continue 'attempt;
            }
            let p: Vec<f64> = draws.iter().map(|d| d / sum).collect();
            let mut start = 0;
            for (j, size) in largest_remainder(&p, idx.len()).into_iter().enumerate() {
                pools[j].extend_from_slice(&idx[start..start + size]);
                start += size;
            }
        }
        let mut clients = Vec::with_capacity(spec.num_clients);
        for (id, mut pool) in pools.into_iter().enumerate() {
            pool.shuffle(&mut rng);
            let n_val = (spec.validation_fraction * pool.len() as f64).floor() as usize;
            let train = pool.split_off(n_val);
            if train.is_empty() {
                continue 'attempt;
            }
            clients.push(ClientSplit {
                id,
                train,
                validation: pool,
            });
        }
        return Ok(Partition {
            spec: spec.clone(),
            attempt,
            clients,
        });
    }
    Err(Error::Partition(format!(
        "every draw left a client without training samples after {MAX_RETRIES} retries"
    )))
}

/// `hist[client][class]` over training and validation samples together.
pub fn class_histogram(ds: &LabeledDataset, partition: &Partition) -> Vec<Vec<usize>> {
    partition
        .clients
        .iter()
        .map(|c| {
            let mut h = vec![0; ds.classes()];
            for &i in c.train.iter().chain(&c.validation) {
                h[ds.labels()[i]] += 1;
            }
            h
        })
        .collect()
}

/// Mean over clients of the chi-square distance between the client's label
/// distribution and the whole dataset's.
pub fn mean_chi_square(ds: &LabeledDataset, partition: &Partition) -> f64 {
    let n = ds.len() as f64;
    let global: Vec<f64> = ds.class_counts().iter().map(|&c| c as f64 / n).collect();
    let hist = class_histogram(ds, partition);
    let total: f64 = hist
        .iter()
        .map(|h| {
            let m: usize = h.iter().sum();
            if m == 0 {
                return 0.0;
            }
            h.iter()
                .zip(&global)
                .filter(|(_, &g)| g > 0.0)
                .map(|(&c, &g)| (c as f64 / m as f64 - g).powi(2) / g)
                .sum::<f64>()
        })
        .sum();
    total / hist.len() as f64
}

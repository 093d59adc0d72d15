//! FLOPs and communication-cost accounting, per-round records and CSV output.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateDecision;
use crate::nn::Network;

/// Bytes per parameter used for the cost formula's byte figure.
pub const COST_BYTES_PER_PARAM: u64 = 4;

/// `2 * active_out * active_in * kernel^2 * out_h * out_w`.
pub fn conv_flops(active_in: usize, active_out: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (active_out * active_in * kernel * kernel * out_h * out_w) as u64
}

pub fn linear_flops(in_features: usize, out_features: usize) -> u64 {
    2 * (in_features * out_features) as u64
}

/// Per-sample FLOPs of `net`; with `decisions` (one per gate slot) gated
/// layers count only their active channels.
pub fn model_flops(net: &Network, decisions: Option<&[GateDecision]>) -> Result<u64> {
    let widths = decisions.map(|d| net.widths_from(d)).transpose()?;
    Ok(net
        .layer_costs(widths.as_deref())
        .iter()
        .map(|c| c.active_flops)
        .sum())
}

/// FLOPs of `net` when every gate slot keeps its configured channel count.
pub fn keep_flops(net: &Network) -> u64 {
    let widths: Vec<usize> = net.gate_slots().iter().map(|s| s.spec.keep).collect();
    net.layer_costs(Some(&widths)).iter().map(|c| c.active_flops).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_count: u64,
    pub rounds_to_target: Option<usize>,
    pub clients: usize,
    pub sample_rate: f64,
    /// Parameter uploads: `params * rounds * clients * rate`.
    pub total_cost: f64,
    pub total_bytes: f64,
}

/// Communication cost of reaching the target; an unreached target costs 0
/// and keeps `rounds_to_target` empty.
pub fn comm_cost(params_count: u64, rounds_to_target: Option<usize>, clients: usize, sample_rate: f64) -> CostReport {
    let rounds = rounds_to_target.unwrap_or(0);
    let total_cost = params_count as f64 * rounds as f64 * clients as f64 * sample_rate;
    CostReport {
        params_count,
        rounds_to_target,
        clients,
        sample_rate,
        total_cost,
        total_bytes: total_cost * COST_BYTES_PER_PARAM as f64,
    }
}

/// First 1-indexed round whose accuracy reaches `target`.
pub fn rounds_to_target(accuracies: impl IntoIterator<Item = f64>, target: f64) -> Option<usize> {
    accuracies
        .into_iter()
        .position(|a| a >= target)
        .map(|i| i + 1)
}

/// Cumulative bytes per direction and kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounts {
    pub up_weights: u64,
    pub up_variates: u64,
    pub down_weights: u64,
    pub down_variates: u64,
    pub up_gates: u64,
    pub down_gates: u64,
}

impl ByteCounts {
    pub fn up(&self) -> u64 {
        self.up_weights + self.up_variates + self.up_gates
    }

    pub fn down(&self) -> u64 {
        self.down_weights + self.down_variates + self.down_gates
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Pooled top-1 over all clients' local validation slices.
    pub avg_local_top1: f64,
    pub global_top1: f64,
    pub client_top1: Vec<f64>,
    pub bytes: ByteCounts,
    pub flops_per_sample: f64,
    pub sparsity: f64,
    pub seconds: f64,
}

const CSV_HEADER: [&str; 13] = [
    "run_id",
    "strategy",
    "pruning",
    "round",
    "avg_local_top1",
    "global_top1",
    "bytes_up_weights",
    "bytes_up_variates",
    "bytes_down_weights",
    "bytes_down_variates",
    "flops_per_sample",
    "sparsity",
    "seconds",
];

/// Per-round CSV writer; every row is flushed as soon as it is written.
pub struct MetricsCsv {
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
    run_id: String,
    strategy: String,
    pruning: bool,
    timing: bool,
}

impl MetricsCsv {
    /// `timing` controls whether wall-clock seconds are written; without it
    /// the column stays empty and reruns produce identical files.
    pub fn create(path: &Path, run_id: &str, strategy: &str, pruning: bool, timing: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        out.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        let mut me = Self {
            path: path.to_path_buf(),
            out,
            run_id: run_id.to_string(),
            strategy: strategy.to_string(),
            pruning,
            timing,
        };
        me.flush()?;
        Ok(me)
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        let row = csv_row(&self.run_id, &self.strategy, self.pruning, m, self.timing);
        self.out.write_record(&row).map_err(|e| csv_err(&self.path, e))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn csv_header() -> &'static [&'static str] {
    &CSV_HEADER
}

pub fn csv_row(run_id: &str, strategy: &str, pruning: bool, m: &RoundMetrics, timing: bool) -> Vec<String> {
    vec![
        run_id.to_string(),
        strategy.to_string(),
        pruning.to_string(),
        m.round.to_string(),
        format!("{:.6}", m.avg_local_top1),
        format!("{:.6}", m.global_top1),
        m.bytes.up_weights.to_string(),
        m.bytes.up_variates.to_string(),
        m.bytes.down_weights.to_string(),
        m.bytes.down_variates.to_string(),
        format!("{:.1}", m.flops_per_sample),
        format!("{:.6}", m.sparsity),
        if timing { format!("{:.3}", m.seconds) } else { String::new() },
    ]
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Run summary written next to the per-round CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: String,
    pub pruning: bool,
    pub rounds: usize,
    pub target_accuracy: f64,
    pub final_avg_local_top1: f64,
    pub best_avg_local_top1: f64,
    pub final_global_top1: f64,
    pub original_flops_per_sample: u64,
    pub flops_per_sample: f64,
    pub sparsity: f64,
    pub bytes: ByteCounts,
    pub partition_sha256: String,
    /// Cost from backbone parameter counts.
    pub cost: CostReport,
    /// Same formula evaluated with the serialized byte length per upload.
    pub cost_serialized_bytes: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_examples() {
        assert_eq!(conv_flops(3, 8, 3, 32, 32), 442_368);
        assert_eq!(conv_flops(2, 4, 3, 5, 5) * 4, conv_flops(4, 8, 3, 5, 5));
        assert_eq!(conv_flops(3, 0, 3, 32, 32), 0);
        assert_eq!(linear_flops(4, 3), 24);
    }

    #[test]
    fn cost_examples() {
        let c = comm_cost(1_000_000, Some(100), 10, 0.4);
        assert_eq!(c.total_cost, 4e8);
        assert_eq!(c.total_bytes, 1.6e9);
        assert_eq!(comm_cost(1_000_000, Some(0), 10, 0.4).total_cost, 0.0);
        assert_eq!(comm_cost(7, Some(3), 1, 1.0).total_cost, 21.0);
        assert_eq!(comm_cost(7, None, 1, 1.0).total_cost, 0.0);
    }

    #[test]
    fn rounds_to_target_examples() {
        assert_eq!(rounds_to_target([0.5, 0.8], 0.78), Some(2));
        assert_eq!(rounds_to_target([0.5, 0.8], 0.0), Some(1));
        assert_eq!(rounds_to_target([0.5, 0.8], 0.9), None);
    }

    #[test]
    fn csv_rows_flushed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsCsv::create(&path, "r", "fedavg", false, false).unwrap();
        let m = RoundMetrics {
            round: 1,
            avg_local_top1: 0.5,
            global_top1: 0.25,
            client_top1: vec![0.5],
            bytes: ByteCounts::default(),
            flops_per_sample: 10.0,
            sparsity: 1.0,
            seconds: 1.5,
        };
        w.write(&m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().ends_with("1.000000,"));
    }
}

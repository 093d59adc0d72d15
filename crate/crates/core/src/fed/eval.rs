use crate::data::LabeledDataset;
use crate::error::Result;
use crate::gate;
use crate::nn::Network;
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    /// FLOPs executed over all evaluated samples.
    pub flops: u64,
    /// Sum over samples of the per-sample sparsity ratio.
    pub sparsity_sum: f64,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn flops_per_sample(&self) -> f64 {
        self.flops as f64 / self.total.max(1) as f64
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity_sum / self.total.max(1) as f64
    }

    pub fn merge(&mut self, other: &EvalResult) {
        self.correct += other.correct;
        self.total += other.total;
        self.flops += other.flops;
        self.sparsity_sum += other.sparsity_sum;
    }
}

/// Top-1 accuracy of `params` (gated by `gates` when given) on the listed
/// samples, in evaluation mode.
pub fn evaluate(
    net: &Network,
    params: &ParamSet,
    gates: Option<&ParamSet>,
    data: &LabeledDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<EvalResult> {
    let mut out = EvalResult::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let f = net.infer(params, gates, &x)?;
        let classes = f.logits.shape()[1];
        for (row, &label) in f.logits.data().chunks(classes).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            out.correct += usize::from(pred == label);
        }
        out.total += chunk.len();
        out.flops += f.tape.measured_flops();
        if f.tape.is_gated() {
            for b in 0..chunk.len() {
                out.sparsity_sum += gate::sparsity_ratio(net, &f.tape.sample_decisions(b))?;
            }
        } else {
            out.sparsity_sum += chunk.len() as f64;
        }
    }
    Ok(out)
}

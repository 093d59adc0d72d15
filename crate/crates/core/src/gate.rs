//! Dynamic channel-pruning gates.
//!
//! A gate looks at the input feature map of a convolution, averages each
//! channel down to a scalar, maps that vector through a small linear layer and
//! keeps the `keep` output channels with the highest sigmoid saliency. Kept
//! channels are multiplied by their saliency so the gate receives gradient;
//! every other output channel is exactly zero and its filter slice is never
//! touched, forward or backward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Default Lasso coefficient on the gate pre-activations.
pub const DEFAULT_LASSO: f64 = 5e-3;
/// Initial gate bias; sigmoid(2) ~ 0.88 so every channel starts out salient.
pub const GATE_BIAS_INIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub layer_name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of output channels kept per sample.
    pub keep: usize,
    pub lasso: f64,
}

impl GateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keep == 0 || self.keep > self.out_channels {
            return Err(Error::Config(format!(
                "gate `{}`: keep count {} outside 1..={}",
                self.layer_name, self.keep, self.out_channels
            )));
        }
        if !(self.lasso >= 0.0 && self.lasso.is_finite()) {
            return Err(Error::Config(format!(
                "gate `{}`: lasso coefficient must be >= 0",
                self.layer_name
            )));
        }
        Ok(())
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep as f64 / self.out_channels as f64
    }
}

/// How many output channels each gated convolution keeps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// Roughly halves every gated convolution's FLOPs: keep 1/sqrt(2) of the
    /// outputs when the input is itself gated (so in x out ~ 0.5), and 1/2
    /// when the input is dense.
    #[default]
    Default,
    /// The same keep ratio on every gated layer.
    Uniform(f64),
    /// Explicit keep counts by layer name; unlisted layers use the default.
    Layers(BTreeMap<String, usize>),
}

pub const DENSE_INPUT_KEEP: f64 = 0.5;
pub const GATED_INPUT_KEEP: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl KeepPolicy {
    pub fn keep_count(&self, layer: &str, out_channels: usize, input_gated: bool) -> usize {
        let default_ratio = if input_gated {
            GATED_INPUT_KEEP
        } else {
            DENSE_INPUT_KEEP
        };
        let from_ratio = |r: f64| ((r * out_channels as f64).round() as usize).clamp(1, out_channels);
        match self {
            KeepPolicy::Default => from_ratio(default_ratio),
            KeepPolicy::Uniform(r) => from_ratio(*r),
            KeepPolicy::Layers(map) => map
                .get(layer)
                .copied()
                .unwrap_or_else(|| from_ratio(default_ratio)),
        }
    }
}

/// Gating switched on for a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub keep: KeepPolicy,
    pub lasso: f64,
    /// Restrict gating to these gateable convolutions (all when `None`).
    pub layers: Option<Vec<String>>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            keep: KeepPolicy::Default,
            lasso: DEFAULT_LASSO,
            layers: None,
        }
    }
}

/// One sample's gate output for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Kept channel indices, strictly increasing.
    pub selected: Vec<usize>,
    pub saliency: Vec<f64>,
    pub pre_activation: Vec<f64>,
}

/// A layer's gate output for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDecision {
    pub layer: String,
    pub keep: usize,
    pub selected: Vec<Vec<usize>>,
    /// `batch x channels`, true where the channel is kept.
    pub mask: Vec<bool>,
    pub saliency: Tensor,
    pub pre_activation: Tensor,
}

impl LayerDecision {
    pub fn batch(&self) -> usize {
        self.selected.len()
    }

    pub fn channels(&self) -> usize {
        self.saliency.shape()[1]
    }

    pub fn sample(&self, b: usize) -> GateDecision {
        let c = self.channels();
        GateDecision {
            selected: self.selected[b].clone(),
            saliency: self.saliency.data()[b * c..][..c].to_vec(),
            pre_activation: self.pre_activation.data()[b * c..][..c].to_vec(),
        }
    }

    /// Channels kept by at least one sample in the batch.
    pub fn union(&self) -> Vec<bool> {
        let c = self.channels();
        let mut any = vec![false; c];
        for row in self.mask.chunks(c) {
            for (a, &m) in any.iter_mut().zip(row) {
                *a |= m;
            }
        }
        any
    }
}

/// Spatial average of each channel: `batch x C x H x W -> batch x C`.
pub fn subsample(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::Structural(format!(
            "subsample expects a 4-D feature map, got {:?}",
            x.shape()
        )));
    }
    Ok(ops::spatial_mean(x))
}

/// Indices of the `k` largest entries, ties broken by lowest index, returned
/// in increasing order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Runs the gate's linear map and K-argmax over a batch of channel means.
///
/// Channels are ranked by their pre-activation. The sigmoid is strictly
/// increasing, so this is the same set as ranking by saliency, but it stays
/// well ordered where saliencies saturate to the same float.
pub fn gate_decide(
    s: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &GateSpec,
) -> Result<LayerDecision> {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    if s.shape().len() != 2
        || s.shape()[1] != cin
        || weight.shape() != [cout, cin]
        || bias.shape() != [cout]
    {
        return Err(Error::Structural(format!(
            "gate `{}`: input {:?}, weight {:?}, bias {:?} inconsistent with {cin}->{cout}",
            spec.layer_name,
            s.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let batch = s.shape()[0];
    let (pre, _) = ops::linear_forward(s, weight, bias.data())?;
    let mut saliency = pre.clone();
    saliency
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = ops::sigmoid(*v));
    let mut selected = Vec::with_capacity(batch);
    let mut mask = vec![false; batch * cout];
    for b in 0..batch {
        let row = &pre.data()[b * cout..][..cout];
        let keep = top_k(row, spec.keep);
        for &c in &keep {
            mask[b * cout + c] = true;
        }
        selected.push(keep);
    }
    Ok(LayerDecision {
        layer: spec.layer_name.clone(),
        keep: spec.keep,
        selected,
        mask,
        saliency,
        pre_activation: pre,
    })
}

/// Saliency-scaled convolution over the kept channels only.
///
/// Output channel `c` of sample `b` is `saliency[b, c] * conv(x, filter c)`
/// when `c` is kept and exactly zero otherwise; input channels dropped by
/// `decision_in` are skipped. Returns the output and the FLOPs performed.
pub fn gated_conv_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    geom: &ConvGeom,
    decision_out: &LayerDecision,
    decision_in: Option<&LayerDecision>,
) -> Result<(Tensor, u64)> {
    if decision_out.channels() != geom.out_channels
        || decision_in.is_some_and(|d| d.channels() != geom.in_channels)
    {
        return Err(Error::Structural(
            "gate decision width does not match the convolution".into(),
        ));
    }
    let (mut y, flops) = ops::conv_forward(
        x,
        weight,
        bias,
        geom,
        Some(&decision_out.mask),
        decision_in.map(|d| d.mask.as_slice()),
    )?;
    apply_saliency(&mut y, decision_out);
    Ok((y, flops))
}

pub(crate) fn apply_saliency(y: &mut Tensor, decision: &LayerDecision) {
    let plane = y.shape()[2] * y.shape()[3];
    let sal = decision.saliency.data();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        if decision.mask[i] {
            let s = sal[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        } else {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `lambda * sum over layers of the batch mean of ||pre_activation||_1`.
pub fn lasso_gate_loss<'a>(decisions: impl IntoIterator<Item = &'a LayerDecision>, lambda: f64) -> f64 {
    let total: f64 = decisions
        .into_iter()
        .map(|d| {
            let l1: f64 = d.pre_activation.data().iter().map(|v| v.abs()).sum();
            l1 / d.batch() as f64
        })
        .sum();
    lambda * total
}

/// Fraction of trainable backbone parameters inside the kept filter slices
/// for one sample. `decisions[i]` belongs to gate slot `i` of `net`.
pub fn sparsity_ratio(net: &Network, decisions: &[GateDecision]) -> Result<f64> {
    let widths = net.widths_from(decisions)?;
    let costs = net.layer_costs(Some(&widths));
    let total: usize = costs.iter().map(|c| c.params).sum();
    let kept: usize = costs.iter().map(|c| c.active_params).sum();
    Ok(kept as f64 / total as f64)
}

//! Compiled networks: parameter layout, gated forward pass with a tape, and
//! the matching backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gate::{self, GateConfig, GateDecision, GateSpec, LayerDecision, GATE_BIAS_INIT};
use crate::nn::ops::{self, BatchStats, ConvGeom, NormCache, BN_MOMENTUM};
use crate::nn::spec::{Block, LayerKind, LayerSpec, ModelSpec, ResidualSpec, Shape};
use crate::tensor::{Param, ParamSet, Tensor};

/// Whether normalization layers use batch statistics (and update their
/// running averages) or the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvNode {
    name: String,
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
    /// A normalization layer immediately following the convolution. Gated
    /// convolutions normalize over kept channels and apply the saliency after
    /// normalization, where it is not cancelled by the batch statistics.
    norm: Option<(String, NormIdx)>,
    gate: Option<usize>,
    /// Gate slot whose decision determines which input channels are live.
    input_gate: Option<usize>,
}

#[derive(Clone, Debug)]
enum Node {
    Conv(ConvNode),
    Norm {
        name: String,
        idx: NormIdx,
    },
    Relu {
        name: String,
    },
    AvgPool {
        name: String,
        size: usize,
    },
    GlobalAvgPool {
        name: String,
    },
    Flatten {
        name: String,
    },
    Linear {
        name: String,
        weight: usize,
        bias: usize,
    },
    Residual {
        name: String,
        body: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

impl Node {
    fn name(&self) -> &str {
        match self {
            Node::Conv(c) => &c.name,
            Node::Norm { name, .. }
            | Node::Relu { name }
            | Node::AvgPool { name, .. }
            | Node::GlobalAvgPool { name }
            | Node::Flatten { name }
            | Node::Linear { name, .. }
            | Node::Residual { name, .. } => name,
        }
    }
}

/// A gate attached to one convolution.
#[derive(Clone, Debug)]
pub struct GateSlot {
    pub spec: GateSpec,
    pub input_gate: Option<usize>,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    HeUniform(usize),
    GateUniform(usize),
    Zeros,
    Ones,
    Const(f64),
}

/// Per-layer parameter and FLOP counts at full and at active width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    pub active_flops: u64,
    /// Trainable parameters only.
    pub params: usize,
    pub active_params: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    nodes: Vec<Node>,
    template: ParamSet,
    inits: Vec<Init>,
    slots: Vec<GateSlot>,
    gate_template: ParamSet,
    gate_inits: Vec<Init>,
}

struct Builder<'a> {
    gating: Option<&'a GateConfig>,
    template: ParamSet,
    inits: Vec<Init>,
    slots: Vec<GateSlot>,
    gate_template: ParamSet,
    gate_inits: Vec<Init>,
}

enum Item<'a> {
    Layer(&'a LayerSpec),
    Residual(&'a ResidualSpec),
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        self.inits.push(init);
        self.template.push(name, Param::new(Tensor::zeros(shape)))
    }

    fn buffer(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        self.inits.push(init);
        self.template.push(name, Param::buffer(Tensor::zeros(shape)))
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<NormIdx> {
        Ok(NormIdx {
            gamma: self.param(format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: self.param(format!("{name}.beta"), &[channels], Init::Zeros)?,
            mean: self.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            var: self.buffer(format!("{name}.running_var"), &[channels], Init::Ones)?,
        })
    }

    fn wants_gate(&self, layer: &str, gateable: bool) -> bool {
        match self.gating {
            Some(cfg) if gateable => cfg
                .layers
                .as_ref()
                .is_none_or(|names| names.iter().any(|n| n == layer)),
            _ => false,
        }
    }

    fn compile(
        &mut self,
        items: &[Item<'_>],
        mut shape: Shape,
        active_src: &mut Option<usize>,
    ) -> Result<(Vec<Node>, Shape)> {
        let mut nodes = Vec::new();
        let mut i = 0;
        while i < items.len() {
            match items[i] {
                Item::Residual(res) => {
                    let body_items: Vec<Item> = res.body.iter().map(Item::Layer).collect();
                    let short_items: Vec<Item> = res.shortcut.iter().map(Item::Layer).collect();
                    let mut src_body = *active_src;
                    let mut src_short = *active_src;
                    let (body, out) = self.compile(&body_items, shape, &mut src_body)?;
                    let (shortcut, _) = self.compile(&short_items, shape, &mut src_short)?;
                    nodes.push(Node::Residual {
                        name: res.name.clone(),
                        body,
                        shortcut,
                    });
                    *active_src = None;
                    shape = out;
                }
                Item::Layer(layer) => {
                    let next = crate::nn::spec::infer_layer(layer, shape)?;
                    let name = layer.name.clone();
                    match &layer.kind {
                        LayerKind::Conv2d(conv) => {
                            let Shape::Image { h, w, .. } = shape else {
                                unreachable!("validated by infer_layer")
                            };
                            let geom = ConvGeom::new(
                                conv.in_channels,
                                conv.out_channels,
                                conv.kernel_size,
                                conv.stride,
                                conv.padding,
                                h,
                                w,
                            )?;
                            let fan_in = conv.in_channels * conv.kernel_size * conv.kernel_size;
                            let weight = self.param(
                                format!("{name}.weight"),
                                &[
                                    conv.out_channels,
                                    conv.in_channels,
                                    conv.kernel_size,
                                    conv.kernel_size,
                                ],
                                Init::HeUniform(fan_in),
                            )?;
                            let bias = if conv.bias {
                                Some(self.param(format!("{name}.bias"), &[conv.out_channels], Init::Zeros)?)
                            } else {
                                None
                            };
                            let norm = match items.get(i + 1) {
                                Some(Item::Layer(LayerSpec {
                                    name: nname,
                                    kind: LayerKind::Norm { channels },
                                })) => {
                                    i += 1;
                                    Some((nname.clone(), self.norm(nname, *channels)?))
                                }
                                _ => None,
                            };
                            let input_gate = *active_src;
                            let gate = if self.wants_gate(&name, conv.gated) {
                                let cfg = self.gating.expect("gating checked");
                                let spec = GateSpec {
                                    layer_name: name.clone(),
                                    in_channels: conv.in_channels,
                                    out_channels: conv.out_channels,
                                    keep: cfg.keep.keep_count(
                                        &name,
                                        conv.out_channels,
                                        input_gate.is_some(),
                                    ),
                                    lasso: cfg.lasso,
                                };
                                spec.validate()?;
                                self.gate_inits.push(Init::GateUniform(conv.in_channels));
                                let gw = self.gate_template.push(
                                    format!("{name}.gate.weight"),
                                    Param::new(Tensor::zeros(&[conv.out_channels, conv.in_channels])),
                                )?;
                                self.gate_inits.push(Init::Const(GATE_BIAS_INIT));
                                let gb = self.gate_template.push(
                                    format!("{name}.gate.bias"),
                                    Param::new(Tensor::zeros(&[conv.out_channels])),
                                )?;
                                self.slots.push(GateSlot {
                                    spec,
                                    input_gate,
                                    weight: gw,
                                    bias: gb,
                                });
                                Some(self.slots.len() - 1)
                            } else {
                                None
                            };
                            *active_src = gate;
                            nodes.push(Node::Conv(ConvNode {
                                name,
                                geom,
                                weight,
                                bias,
                                norm,
                                gate,
                                input_gate,
                            }));
                        }
                        LayerKind::Norm { channels } => {
                            let idx = self.norm(&name, *channels)?;
                            nodes.push(Node::Norm { name, idx });
                        }
                        LayerKind::Relu => nodes.push(Node::Relu { name }),
                        LayerKind::AvgPool { size } => nodes.push(Node::AvgPool { name, size: *size }),
                        LayerKind::GlobalAvgPool => nodes.push(Node::GlobalAvgPool { name }),
                        LayerKind::Flatten => {
                            *active_src = None;
                            nodes.push(Node::Flatten { name });
                        }
                        LayerKind::Linear {
                            in_features,
                            out_features,
                        } => {
                            *active_src = None;
                            let weight = self.param(
                                format!("{name}.weight"),
                                &[*out_features, *in_features],
                                Init::HeUniform(*in_features),
                            )?;
                            let bias = self.param(format!("{name}.bias"), &[*out_features], Init::Zeros)?;
                            nodes.push(Node::Linear { name, weight, bias });
                        }
                    }
                    shape = next;
                }
            }
            i += 1;
        }
        Ok((nodes, shape))
    }
}

/// Cached activations of one node, consumed by the backward pass.
enum Cache {
    Conv {
        input: Tensor,
        norm: Option<NormCache>,
        /// Channel means fed to the gate, and the pre-saliency output.
        gate: Option<(Tensor, Tensor)>,
    },
    Norm(NormCache),
    Relu(Tensor),
    AvgPool(Vec<usize>),
    GlobalAvgPool(Vec<usize>),
    Flatten(Vec<usize>),
    Linear(Tensor),
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
        sum: Tensor,
    },
}

struct StatUpdate {
    mean: usize,
    var: usize,
    stats: BatchStats,
}

struct FwdCtx<'a> {
    params: &'a ParamSet,
    gates: Option<&'a ParamSet>,
    mode: Mode,
    decisions: Vec<Option<LayerDecision>>,
    flops: u64,
    stats: Vec<StatUpdate>,
}

/// Record of one forward pass.
pub struct Tape {
    caches: Vec<Cache>,
    decisions: Vec<Option<LayerDecision>>,
    flops: u64,
    batch: usize,
    dlogits: Option<Tensor>,
    consumed: bool,
}

impl Tape {
    /// Gate decisions indexed by gate slot; empty when the pass was ungated.
    pub fn decisions(&self) -> Vec<&LayerDecision> {
        self.decisions.iter().flatten().collect()
    }

    pub fn is_gated(&self) -> bool {
        self.decisions.iter().any(Option::is_some)
    }

    /// FLOPs actually executed by convolutions and linear layers, whole batch.
    pub fn measured_flops(&self) -> u64 {
        self.flops
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Sign pattern of every ReLU input, in execution order. Gradient checks
    /// use it to detect perturbations that cross a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        fn walk(caches: &[Cache], out: &mut Vec<bool>) {
            for c in caches {
                match c {
                    Cache::Relu(x) => out.extend(x.data().iter().map(|v| *v > 0.0)),
                    Cache::Residual { body, shortcut, sum } => {
                        walk(body, out);
                        walk(shortcut, out);
                        out.extend(sum.data().iter().map(|v| *v > 0.0));
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.caches, &mut out);
        out
    }

    /// Inputs of the top-level ReLU layers, in execution order.
    pub fn relu_inputs(&self) -> Vec<&Tensor> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::Relu(x) => Some(x),
                _ => None,
            })
            .collect()
    }

    /// Decisions of sample `b`, one per gate slot.
    pub fn sample_decisions(&self, b: usize) -> Vec<GateDecision> {
        self.decisions.iter().flatten().map(|d| d.sample(b)).collect()
    }
}

pub struct Forward {
    pub logits: Tensor,
    pub tape: Tape,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub cross_entropy: f64,
    pub gate: f64,
    pub total: f64,
}

impl Forward {
    /// Attaches `cross_entropy + gate Lasso` to the tape and returns its value.
    pub fn loss(&mut self, net: &Network, labels: &[usize]) -> Result<Loss> {
        let (ce, dlogits) = ops::cross_entropy(&self.logits, labels)?;
        let gate: f64 = net
            .slots
            .iter()
            .zip(&self.tape.decisions)
            .filter_map(|(slot, d)| d.as_ref().map(|d| gate::lasso_gate_loss([d], slot.spec.lasso)))
            .sum();
        self.tape.dlogits = Some(dlogits);
        let total = ce + gate;
        if !total.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok(Loss {
            cross_entropy: ce,
            gate,
            total,
        })
    }
}

impl Network {
    /// Compiles `spec`; gating attaches a gate to every gateable convolution
    /// selected by `gating`.
    pub fn new(spec: ModelSpec, gating: Option<&GateConfig>) -> Result<Network> {
        spec.validate()?;
        let mut b = Builder {
            gating,
            template: ParamSet::new(),
            inits: Vec::new(),
            slots: Vec::new(),
            gate_template: ParamSet::new(),
            gate_inits: Vec::new(),
        };
        let items: Vec<Item> = spec
            .blocks
            .iter()
            .map(|blk| match blk {
                Block::Layer(l) => Item::Layer(l),
                Block::Residual(r) => Item::Residual(r),
            })
            .collect();
        let [c, h, w] = spec.input;
        let mut src = None;
        let (nodes, _) = b.compile(&items, Shape::Image { c, h, w }, &mut src)?;
        if let Some(names) = gating.and_then(|g| g.layers.as_ref()) {
            for n in names {
                if !b.slots.iter().any(|s| &s.spec.layer_name == n) {
                    return Err(Error::Config(format!("`{n}` is not a gateable convolution")));
                }
            }
        }
        Ok(Network {
            spec,
            nodes,
            template: b.template,
            inits: b.inits,
            slots: b.slots,
            gate_template: b.gate_template,
            gate_inits: b.gate_inits,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn gate_slots(&self) -> &[GateSlot] {
        &self.slots
    }

    pub fn gate_specs(&self) -> Vec<GateSpec> {
        self.slots.iter().map(|s| s.spec.clone()).collect()
    }

    pub fn is_gated(&self) -> bool {
        !self.slots.is_empty()
    }

    /// Zero-valued parameter set with the backbone layout.
    pub fn param_template(&self) -> &ParamSet {
        &self.template
    }

    pub fn gate_template(&self) -> &ParamSet {
        &self.gate_template
    }

    /// Fan-in scaled uniform weights, unit norm scales, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        init_set(&self.template, &self.inits, seed)
    }

    /// Small random gate weights and a positive bias, so every channel starts
    /// with high saliency.
    pub fn init_gates(&self, seed: u64) -> ParamSet {
        init_set(&self.gate_template, &self.gate_inits, seed)
    }

    /// Runs the network. In [`Mode::Train`] normalization running statistics
    /// in `params` are updated after the pass.
    pub fn forward(
        &self,
        params: &mut ParamSet,
        gates: Option<&ParamSet>,
        x: &Tensor,
        mode: Mode,
    ) -> Result<Forward> {
        let (fwd, stats) = self.run(params, gates, x, mode)?;
        for up in stats {
            for (ch, (m, v)) in up.stats.mean.iter().zip(&up.stats.var_unbiased).enumerate() {
                if let (Some(m), Some(v)) = (m, v) {
                    let rm = &mut params.param_mut(up.mean).value.data_mut()[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    let rv = &mut params.param_mut(up.var).value.data_mut()[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
                }
            }
        }
        Ok(fwd)
    }

    /// Evaluation-mode forward that leaves `params` untouched.
    pub fn infer(&self, params: &ParamSet, gates: Option<&ParamSet>, x: &Tensor) -> Result<Forward> {
        self.run(params, gates, x, Mode::Eval).map(|(f, _)| f)
    }

    fn run(
        &self,
        params: &ParamSet,
        gates: Option<&ParamSet>,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Forward, Vec<StatUpdate>)> {
        params.check_structure(&self.template)?;
        if let Some(g) = gates {
            g.check_structure(&self.gate_template)?;
        }
        let [c, h, w] = self.spec.input;
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::Structural(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        let gated = gates.is_some() && self.is_gated();
        let mut ctx = FwdCtx {
            params,
            gates: if gated { gates } else { None },
            mode,
            decisions: vec![None; self.slots.len()],
            flops: 0,
            stats: Vec::new(),
        };
        let (logits, caches) = self.run_nodes(&self.nodes, x.clone(), &mut ctx)?;
        let tape = Tape {
            caches,
            decisions: ctx.decisions,
            flops: ctx.flops,
            batch: x.shape()[0],
            dlogits: None,
            consumed: false,
        };
        Ok((Forward { logits, tape }, ctx.stats))
    }

    fn run_nodes(&self, nodes: &[Node], mut x: Tensor, ctx: &mut FwdCtx) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(nodes.len());
        for node in nodes {
            let (y, cache) = self.run_node(node, x, ctx)?;
            if !y.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation in layer `{}`",
                    node.name()
                )));
            }
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    fn run_node(&self, node: &Node, x: Tensor, ctx: &mut FwdCtx) -> Result<(Tensor, Cache)> {
        let p = ctx.params;
        Ok(match node {
            Node::Conv(conv) => {
                let decision = match (conv.gate, ctx.gates) {
                    (Some(slot), Some(gates)) => {
                        let s = ops::spatial_mean(&x);
                        let gs = &self.slots[slot];
                        let d = gate::gate_decide(
                            &s,
                            &gates.param(gs.weight).value,
                            &gates.param(gs.bias).value,
                            &gs.spec,
                        )?;
                        Some((slot, s, d))
                    }
                    _ => None,
                };
                let in_mask: Option<Vec<bool>> = conv
                    .input_gate
                    .and_then(|g| ctx.decisions[g].as_ref())
                    .map(|d| d.mask.clone());
                let out_mask = decision.as_ref().map(|(_, _, d)| d.mask.as_slice());
                let (z, flops) = ops::conv_forward(
                    &x,
                    p.param(conv.weight).value.data(),
                    conv.bias.map(|b| p.param(b).value.data()),
                    &conv.geom,
                    out_mask,
                    in_mask.as_deref(),
                )?;
                ctx.flops += flops;
                let (u, norm_cache) = match &conv.norm {
                    Some((_, idx)) => {
                        let (u, cache) = self.norm_forward(&z, idx, out_mask, ctx);
                        (u, Some(cache))
                    }
                    None => (z, None),
                };
                match decision {
                    Some((slot, s, d)) => {
                        let mut y = u.clone();
                        gate::apply_saliency(&mut y, &d);
                        ctx.decisions[slot] = Some(d);
                        (
                            y,
                            Cache::Conv {
                                input: x,
                                norm: norm_cache,
                                gate: Some((s, u)),
                            },
                        )
                    }
                    None => (
                        u,
                        Cache::Conv {
                            input: x,
                            norm: norm_cache,
                            gate: None,
                        },
                    ),
                }
            }
            Node::Norm { idx, .. } => {
                let (u, cache) = self.norm_forward(&x, idx, None, ctx);
                (u, Cache::Norm(cache))
            }
            Node::Relu { .. } => (ops::relu_forward(&x), Cache::Relu(x)),
            Node::AvgPool { size, .. } => (ops::avgpool_forward(&x, *size), Cache::AvgPool(x.shape().to_vec())),
            Node::GlobalAvgPool { .. } => {
                let [b, c, _, _] = ops::dims4(&x);
                let y = ops::spatial_mean(&x).reshape(vec![b, c, 1, 1])?;
                (y, Cache::GlobalAvgPool(x.shape().to_vec()))
            }
            Node::Flatten { .. } => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest = shape[1..].iter().product();
                (x.reshape(vec![b, rest])?, Cache::Flatten(shape))
            }
            Node::Linear { weight, bias, .. } => {
                let (y, flops) = ops::linear_forward(&x, &p.param(*weight).value, p.param(*bias).value.data())?;
                ctx.flops += flops;
                (y, Cache::Linear(x))
            }
            Node::Residual { body, shortcut, .. } => {
                let (main, body_caches) = self.run_nodes(body, x.clone(), ctx)?;
                let (side, short_caches) = self.run_nodes(shortcut, x, ctx)?;
                let mut sum = main;
                for (a, b) in sum.data_mut().iter_mut().zip(side.data()) {
                    *a += b;
                }
                (
                    ops::relu_forward(&sum),
                    Cache::Residual {
                        body: body_caches,
                        shortcut: short_caches,
                        sum,
                    },
                )
            }
        })
    }

    fn norm_forward(&self, z: &Tensor, idx: &NormIdx, mask: Option<&[bool]>, ctx: &mut FwdCtx) -> (Tensor, NormCache) {
        let p = ctx.params;
        let gamma = p.param(idx.gamma).value.data();
        let beta = p.param(idx.beta).value.data();
        match ctx.mode {
            Mode::Train => {
                let (u, cache, stats) = ops::norm_forward_train(z, gamma, beta, mask);
                ctx.stats.push(StatUpdate {
                    mean: idx.mean,
                    var: idx.var,
                    stats,
                });
                (u, cache)
            }
            Mode::Eval => ops::norm_forward_eval(
                z,
                gamma,
                beta,
                p.param(idx.mean).value.data(),
                p.param(idx.var).value.data(),
                mask,
            ),
        }
    }

    /// Back-propagates `loss_grad` times the attached loss, accumulating into
    /// the gradients of `params` and (for gated passes) `gates`.
    pub fn backward(
        &self,
        tape: &mut Tape,
        loss_grad: f64,
        params: &mut ParamSet,
        gates: Option<&mut ParamSet>,
    ) -> Result<()> {
        if tape.consumed {
            return Err(Error::Usage("tape has already been consumed by a backward pass".into()));
        }
        let Some(dlogits) = tape.dlogits.as_ref() else {
            return Err(Error::Usage("no loss attached to the tape".into()));
        };
        params.check_structure(&self.template)?;
        let gated = tape.is_gated();
        if gated && gates.is_none() {
            return Err(Error::Usage("gated tape needs the gate parameters for backward".into()));
        }
        let mut d = dlogits.clone();
        d.data_mut().iter_mut().for_each(|v| *v *= loss_grad);
        let caches = std::mem::take(&mut tape.caches);
        tape.consumed = true;
        let mut ctx = BackCtx {
            params,
            gates: if gated { gates } else { None },
            decisions: &tape.decisions,
            seed: loss_grad,
            batch: tape.batch,
        };
        self.back_nodes(&self.nodes, caches, d, &mut ctx);
        Ok(())
    }

    fn back_nodes(&self, nodes: &[Node], caches: Vec<Cache>, mut d: Tensor, ctx: &mut BackCtx) -> Tensor {
        for (node, cache) in nodes.iter().zip(caches).rev() {
            d = self.back_node(node, cache, d, ctx);
        }
        d
    }

    fn back_node(&self, node: &Node, cache: Cache, dy: Tensor, ctx: &mut BackCtx) -> Tensor {
        match (node, cache) {
            (Node::Conv(conv), Cache::Conv { input, norm, gate }) => {
                let decisions = ctx.decisions;
                let decision = conv.gate.and_then(|g| decisions[g].as_ref());
                let in_mask = conv
                    .input_gate
                    .and_then(|g| decisions[g].as_ref())
                    .map(|d| d.mask.as_slice());
                let out_mask = decision.map(|d| d.mask.as_slice());
                let mut gate_dx = None;
                let du = match (decision, gate) {
                    (Some(dec), Some((s, u))) => {
                        let slot = &self.slots[conv.gate.expect("decision implies slot")];
                        let (du, ds) = gate_backward(slot, dec, &s, &u, &dy, ctx);
                        gate_dx = Some(ds);
                        du
                    }
                    _ => dy,
                };
                let dz = match (&conv.norm, norm) {
                    (Some((_, idx)), Some(nc)) => norm_backward(idx, &nc, &du, out_mask, ctx.params),
                    _ => du,
                };
                let p = ctx.params.param(conv.weight);
                let weight = p.value.data().to_vec();
                let mut dw = std::mem::replace(&mut ctx.params.param_mut(conv.weight).grad, Tensor::scalar(0.0));
                let mut db = conv
                    .bias
                    .map(|b| std::mem::replace(&mut ctx.params.param_mut(b).grad, Tensor::scalar(0.0)));
                let mut dx = ops::conv_backward(
                    &input,
                    &weight,
                    &conv.geom,
                    &dz,
                    out_mask,
                    in_mask,
                    dw.data_mut(),
                    db.as_mut().map(|t| t.data_mut()),
                );
                ctx.params.param_mut(conv.weight).grad = dw;
                if let (Some(b), Some(db)) = (conv.bias, db) {
                    ctx.params.param_mut(b).grad = db;
                }
                if let Some(ds) = gate_dx {
                    let grad = ops::spatial_mean_backward(input.shape(), &ds);
                    for (a, b) in dx.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                dx
            }
            (Node::Norm { idx, .. }, Cache::Norm(nc)) => norm_backward(idx, &nc, &dy, None, ctx.params),
            (Node::Relu { .. }, Cache::Relu(x)) => ops::relu_backward(&x, &dy),
            (Node::AvgPool { size, .. }, Cache::AvgPool(shape)) => ops::avgpool_backward(&shape, &dy, *size),
            (Node::GlobalAvgPool { .. }, Cache::GlobalAvgPool(shape)) => {
                let flat = dy.reshape(vec![shape[0], shape[1]]).expect("gap grad shape");
                ops::spatial_mean_backward(&shape, &flat)
            }
            (Node::Flatten { .. }, Cache::Flatten(shape)) => dy.reshape(shape).expect("flatten grad shape"),
            (Node::Linear { weight, bias, .. }, Cache::Linear(x)) => {
                let w = ctx.params.param(*weight).value.clone();
                let mut dw = std::mem::replace(&mut ctx.params.param_mut(*weight).grad, Tensor::scalar(0.0));
                let mut db = std::mem::replace(&mut ctx.params.param_mut(*bias).grad, Tensor::scalar(0.0));
                let dx = ops::linear_backward(&x, &w, &dy, dw.data_mut(), db.data_mut());
                ctx.params.param_mut(*weight).grad = dw;
                ctx.params.param_mut(*bias).grad = db;
                dx
            }
            (
                Node::Residual { body, shortcut, .. },
                Cache::Residual {
                    body: bc,
                    shortcut: sc,
                    sum,
                },
            ) => {
                let dsum = ops::relu_backward(&sum, &dy);
                let mut dx = self.back_nodes(body, bc, dsum.clone(), ctx);
                let dside = self.back_nodes(shortcut, sc, dsum, ctx);
                for (a, b) in dx.data_mut().iter_mut().zip(dside.data()) {
                    *a += b;
                }
                dx
            }
            _ => unreachable!("tape does not match network"),
        }
    }

    /// Active widths per gate slot from one sample's decisions.
    pub fn widths_from(&self, decisions: &[GateDecision]) -> Result<Vec<usize>> {
        if decisions.len() != self.slots.len() {
            return Err(Error::Structural(format!(
                "{} gate decisions for {} gated layers",
                decisions.len(),
                self.slots.len()
            )));
        }
        Ok(decisions.iter().map(|d| d.selected.len()).collect())
    }

    /// Full width of every gate slot.
    pub fn full_widths(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.spec.out_channels).collect()
    }

    /// Per-layer costs; `widths[i]` is the number of output channels kept by
    /// gate slot `i` (full width everywhere when `None`).
    pub fn layer_costs(&self, widths: Option<&[usize]>) -> Vec<LayerCost> {
        let mut out = Vec::new();
        self.costs_of(&self.nodes, widths, &mut out);
        out
    }

    fn costs_of(&self, nodes: &[Node], widths: Option<&[usize]>, out: &mut Vec<LayerCost>) {
        let width = |slot: Option<usize>, full: usize| match (slot, widths) {
            (Some(s), Some(w)) => w[s],
            _ => full,
        };
        for node in nodes {
            match node {
                Node::Conv(c) => {
                    let g = &c.geom;
                    let aout = width(c.gate, g.out_channels);
                    let ain = width(c.input_gate, g.in_channels);
                    let kk = g.kernel * g.kernel;
                    let flops = crate::metrics::conv_flops(g.in_channels, g.out_channels, g.kernel, g.out_h, g.out_w);
                    let active_flops = crate::metrics::conv_flops(ain, aout, g.kernel, g.out_h, g.out_w);
                    let bias = usize::from(c.bias.is_some());
                    out.push(LayerCost {
                        name: c.name.clone(),
                        flops,
                        active_flops,
                        params: g.out_channels * g.in_channels * kk + bias * g.out_channels,
                        active_params: aout * ain * kk + bias * aout,
                    });
                    if let Some((name, _)) = &c.norm {
                        out.push(LayerCost {
                            name: name.clone(),
                            flops: 0,
                            active_flops: 0,
                            params: 2 * g.out_channels,
                            active_params: 2 * aout,
                        });
                    }
                }
                Node::Norm { name, idx } => {
                    let n = self.template.param(idx.gamma).value.len();
                    out.push(LayerCost {
                        name: name.clone(),
                        flops: 0,
                        active_flops: 0,
                        params: 2 * n,
                        active_params: 2 * n,
                    });
                }
                Node::Linear { name, weight, .. } => {
                    let s = self.template.param(*weight).value.shape();
                    let (o, i) = (s[0], s[1]);
                    let flops = crate::metrics::linear_flops(i, o);
                    out.push(LayerCost {
                        name: name.clone(),
                        flops,
                        active_flops: flops,
                        params: o * i + o,
                        active_params: o * i + o,
                    });
                }
                Node::Residual { body, shortcut, .. } => {
                    self.costs_of(body, widths, out);
                    self.costs_of(shortcut, widths, out);
                }
                Node::Relu { .. } | Node::AvgPool { .. } | Node::GlobalAvgPool { .. } | Node::Flatten { .. } => {}
            }
        }
    }
}

struct BackCtx<'a> {
    params: &'a mut ParamSet,
    gates: Option<&'a mut ParamSet>,
    decisions: &'a [Option<LayerDecision>],
    seed: f64,
    batch: usize,
}

/// Saliency and Lasso gradients of one gated layer. Returns the gradient of
/// the pre-saliency output and of the gate's channel-mean input.
fn gate_backward(
    slot: &GateSlot,
    dec: &LayerDecision,
    s: &Tensor,
    u: &Tensor,
    dy: &Tensor,
    ctx: &mut BackCtx,
) -> (Tensor, Tensor) {
    let [batch, cout, h, w] = ops::dims4(u);
    let plane = h * w;
    let cin = slot.spec.in_channels;
    let sal = dec.saliency.data();
    let pre = dec.pre_activation.data();
    let mut du = Tensor::zeros(u.shape());
    let mut dpre = vec![0.0; batch * cout];
    let lasso = ctx.seed * slot.spec.lasso / ctx.batch as f64;
    for i in 0..batch * cout {
        if dec.mask[i] {
            let dyp = &dy.data()[i * plane..][..plane];
            let up = &u.data()[i * plane..][..plane];
            let dsal: f64 = dyp.iter().zip(up).map(|(a, b)| a * b).sum();
            dpre[i] = dsal * sal[i] * (1.0 - sal[i]);
            for (o, &g) in du.data_mut()[i * plane..][..plane].iter_mut().zip(dyp) {
                *o = sal[i] * g;
            }
        }
        if pre[i] != 0.0 {
            dpre[i] += lasso * pre[i].signum();
        }
    }
    let gates = ctx.gates.as_deref_mut().expect("gated backward has gates");
    let gw = gates.param(slot.weight).value.clone();
    let mut ds = Tensor::zeros(&[batch, cin]);
    for b in 0..batch {
        for c in 0..cout {
            let g = dpre[b * cout + c];
            if g == 0.0 {
                continue;
            }
            let row = &gw.data()[c * cin..][..cin];
            for (o, &wv) in ds.data_mut()[b * cin..][..cin].iter_mut().zip(row) {
                *o += g * wv;
            }
        }
    }
    {
        let dgw = gates.param_mut(slot.weight).grad.data_mut();
        for b in 0..batch {
            let srow = &s.data()[b * cin..][..cin];
            for c in 0..cout {
                let g = dpre[b * cout + c];
                for (o, &sv) in dgw[c * cin..][..cin].iter_mut().zip(srow) {
                    *o += g * sv;
                }
            }
        }
    }
    let dgb = gates.param_mut(slot.bias).grad.data_mut();
    for b in 0..batch {
        for c in 0..cout {
            dgb[c] += dpre[b * cout + c];
        }
    }
    (du, ds)
}

fn norm_backward(idx: &NormIdx, nc: &NormCache, du: &Tensor, mask: Option<&[bool]>, params: &mut ParamSet) -> Tensor {
    let gamma = params.param(idx.gamma).value.data().to_vec();
    let mut dgamma = std::mem::replace(&mut params.param_mut(idx.gamma).grad, Tensor::scalar(0.0));
    let mut dbeta = std::mem::replace(&mut params.param_mut(idx.beta).grad, Tensor::scalar(0.0));
    let dz = ops::norm_backward(du, nc, &gamma, mask, dgamma.data_mut(), dbeta.data_mut());
    params.param_mut(idx.gamma).grad = dgamma;
    params.param_mut(idx.beta).grad = dbeta;
    dz
}

fn init_set(template: &ParamSet, inits: &[Init], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = template.clone();
    for ((_, p), init) in out.iter_mut().zip(inits) {
        let data = p.value.data_mut();
        match *init {
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
            Init::GateUniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
            Init::Zeros => data.fill(0.0),
            Init::Ones => data.fill(1.0),
            Init::Const(c) => data.fill(c),
        }
    }
    out
}

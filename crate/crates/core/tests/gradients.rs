mod common;

use std::collections::BTreeMap;

use common::{analytic, fd_check, random_input};
use dpfl::gate::{GateConfig, KeepPolicy};
use dpfl::nn::{Block, ConvSpec, LayerKind, LayerSpec, Mode, ModelSpec, Network, ResidualSpec};
use dpfl::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn model(name: &str, input: [usize; 3], classes: usize, blocks: Vec<Block>) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        input,
        num_classes: classes,
        blocks,
    }
}

fn layer(name: &str, kind: LayerKind) -> Block {
    Block::Layer(LayerSpec::new(name, kind))
}

fn conv(name: &str, c: ConvSpec) -> Block {
    Block::Layer(LayerSpec::conv(name, c))
}

/// Every layer kind once, with two chained gated convolutions and a
/// convolution that has a bias and no normalization.
fn vocabulary_model() -> ModelSpec {
    model(
        "vocab",
        [2, 6, 6],
        3,
        vec![
            conv("c1", ConvSpec::new(2, 4, 3)),
            layer("n1", LayerKind::Norm { channels: 4 }),
            layer("r1", LayerKind::Relu),
            conv("c2", ConvSpec::new(4, 6, 3).gated()),
            layer("n2", LayerKind::Norm { channels: 6 }),
            layer("r2", LayerKind::Relu),
            layer("p2", LayerKind::AvgPool { size: 2 }),
            conv("c3", ConvSpec::new(6, 4, 3).with_bias().gated()),
            layer("r3", LayerKind::Relu),
            conv("c4", ConvSpec::new(4, 4, 1).stride(2).padding(0).with_bias()),
            layer("n4", LayerKind::Norm { channels: 4 }),
            layer("gap", LayerKind::GlobalAvgPool),
            layer("flat", LayerKind::Flatten),
            layer(
                "fc",
                LayerKind::Linear {
                    in_features: 4,
                    out_features: 3,
                },
            ),
        ],
    )
}

fn residual_model() -> ModelSpec {
    let body = vec![
        LayerSpec::conv("res.conv1", ConvSpec::new(3, 4, 3).gated()),
        LayerSpec::new("res.bn1", LayerKind::Norm { channels: 4 }),
        LayerSpec::new("res.relu1", LayerKind::Relu),
        LayerSpec::conv("res.conv2", ConvSpec::new(4, 4, 3)),
        LayerSpec::new("res.bn2", LayerKind::Norm { channels: 4 }),
    ];
    let shortcut = vec![
        LayerSpec::conv("res.short", ConvSpec::new(3, 4, 1)),
        LayerSpec::new("res.short_bn", LayerKind::Norm { channels: 4 }),
    ];
    let same = vec![
        LayerSpec::conv("id.conv1", ConvSpec::new(4, 4, 3).gated()),
        LayerSpec::new("id.bn1", LayerKind::Norm { channels: 4 }),
        LayerSpec::new("id.relu1", LayerKind::Relu),
        LayerSpec::conv("id.conv2", ConvSpec::new(4, 4, 3)),
        LayerSpec::new("id.bn2", LayerKind::Norm { channels: 4 }),
    ];
    model(
        "res",
        [2, 5, 5],
        2,
        vec![
            conv("stem", ConvSpec::new(2, 3, 3)),
            layer("stem.bn", LayerKind::Norm { channels: 3 }),
            layer("stem.relu", LayerKind::Relu),
            Block::Residual(ResidualSpec {
                name: "res".into(),
                body,
                shortcut,
            }),
            Block::Residual(ResidualSpec {
                name: "id".into(),
                body: same,
                shortcut: Vec::new(),
            }),
            layer("gap", LayerKind::GlobalAvgPool),
            layer("flat", LayerKind::Flatten),
            layer(
                "fc",
                LayerKind::Linear {
                    in_features: 4,
                    out_features: 2,
                },
            ),
        ],
    )
}

fn gating(keep: &[(&str, usize)]) -> GateConfig {
    GateConfig {
        keep: KeepPolicy::Layers(keep.iter().map(|(n, k)| (n.to_string(), *k)).collect::<BTreeMap<_, _>>()),
        lasso: 0.05,
        layers: None,
    }
}

fn labels(batch: usize, classes: usize, seed: u64) -> Vec<usize> {
    (0..batch).map(|b| (b + seed as usize) % classes).collect()
}

fn run_trials(spec: ModelSpec, cfg: Option<GateConfig>, trials: u64) {
    let net = Network::new(spec.clone(), cfg.as_ref()).unwrap();
    let [c, h, w] = spec.input;
    let mut total = 0;
    for t in 0..trials {
        let params = net.init_params(100 + t);
        let gates = cfg.as_ref().map(|_| net.init_gates(200 + t));
        let x = random_input(&[3, c, h, w], 300 + t);
        let y = labels(3, spec.num_classes, t);
        let r = fd_check(&net, &params, gates.as_ref(), &x, &y, H);
        assert!(r.max_rel < TOL, "trial {t}: {} ({})", r.max_rel, r.worst);
        assert!(r.checked > r.skipped);
        total += r.checked;
    }
    assert!(total > 0);
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    run_trials(vocabulary_model(), None, 20);
}

#[test]
fn gated_layers_and_gate_params_match_finite_differences() {
    run_trials(vocabulary_model(), Some(gating(&[("c2", 4), ("c3", 3)])), 20);
}

#[test]
fn residual_blocks_match_finite_differences() {
    run_trials(residual_model(), None, 20);
    run_trials(residual_model(), Some(gating(&[("res.conv1", 2), ("id.conv1", 3)])), 20);
}

#[test]
fn doubling_upstream_gradient_doubles_every_gradient() {
    let cfg = gating(&[("c2", 4), ("c3", 2)]);
    let net = Network::new(vocabulary_model(), Some(&cfg)).unwrap();
    let params = net.init_params(1);
    let gates = net.init_gates(2);
    let x = random_input(&[4, 2, 6, 6], 3);
    let y = labels(4, 3, 0);
    let (p1, g1) = analytic(&net, &params, Some(&gates), &x, &y, 1.0);
    let (p2, g2) = analytic(&net, &params, Some(&gates), &x, &y, 2.0);
    for (a, b) in p1.iter().zip(p2.iter()) {
        for (u, v) in a.1.grad.data().iter().zip(b.1.grad.data()) {
            assert_eq!((2.0 * u).to_bits(), v.to_bits(), "{}", a.0);
        }
    }
    for (a, b) in g1.unwrap().iter().zip(g2.unwrap().iter()) {
        for (u, v) in a.1.grad.data().iter().zip(b.1.grad.data()) {
            assert_eq!((2.0 * u).to_bits(), v.to_bits(), "{}", a.0);
        }
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let cfg = gating(&[("c2", 3), ("c3", 2)]);
    let net = Network::new(vocabulary_model(), Some(&cfg)).unwrap();
    let params = net.init_params(5);
    let gates = net.init_gates(6);
    let x = random_input(&[4, 2, 6, 6], 7);
    let y = labels(4, 3, 1);
    let (p1, g1) = analytic(&net, &params, Some(&gates), &x, &y, 1.0);
    let (p2, g2) = analytic(&net, &params, Some(&gates), &x, &y, 1.0);
    assert!(p1.bitwise_eq(&p2));
    assert!(g1.unwrap().bitwise_eq(&g2.unwrap()));
}

#[test]
fn tiny_vgg_logits_shape() {
    let net = Network::new(ModelSpec::preset("tiny-vgg").unwrap(), None).unwrap();
    let mut params = net.init_params(0);
    let x = random_input(&[1, 3, 8, 8], 0);
    let f = net.forward(&mut params, None, &x, Mode::Eval).unwrap();
    assert_eq!(f.logits.shape(), [1, 4]);
    assert!(f.logits.is_finite());
}

#[test]
fn consumed_tape_is_a_usage_error() {
    let net = Network::new(vocabulary_model(), None).unwrap();
    let mut params = net.init_params(0);
    let x = random_input(&[2, 2, 6, 6], 0);
    let mut f = net.forward(&mut params, None, &x, Mode::Train).unwrap();
    f.loss(&net, &[0, 1]).unwrap();
    net.backward(&mut f.tape, 1.0, &mut params, None).unwrap();
    let err = net.backward(&mut f.tape, 1.0, &mut params, None).unwrap_err();
    assert!(matches!(err, dpfl::Error::Usage(_)));
}

#[test]
fn wrong_input_shape_is_structural() {
    let net = Network::new(vocabulary_model(), None).unwrap();
    let mut params = net.init_params(0);
    let x = random_input(&[2, 3, 6, 6], 0);
    let err = net.forward(&mut params, None, &x, Mode::Eval).err().unwrap();
    assert!(matches!(err, dpfl::Error::Structural(_)));
}

#[test]
fn non_finite_activation_names_the_layer() {
    let net = Network::new(vocabulary_model(), None).unwrap();
    let mut params = net.init_params(0);
    let mut x = random_input(&[2, 2, 6, 6], 0);
    x.data_mut()[0] = f64::NAN;
    let err = net.forward(&mut params, None, &x, Mode::Eval).err().unwrap();
    assert!(err.is_numeric());
    assert!(err.to_string().contains("c1"), "{err}");
}

#[test]
fn running_stats_move_only_in_train_mode() {
    let net = Network::new(vocabulary_model(), None).unwrap();
    let params = net.init_params(0);
    let x = random_input(&[2, 2, 6, 6], 0);
    let mut p = params.clone();
    net.forward(&mut p, None, &x, Mode::Eval).unwrap();
    assert!(p.bitwise_eq(&params));
    net.forward(&mut p, None, &x, Mode::Train).unwrap();
    assert!(!p.get("n1.running_mean").unwrap().value.bitwise_eq(&params.get("n1.running_mean").unwrap().value));
    let t: Tensor = p.get("c1.weight").unwrap().value.clone();
    assert!(t.bitwise_eq(&params.get("c1.weight").unwrap().value));
}


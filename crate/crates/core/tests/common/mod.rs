#![allow(dead_code)]

use dpfl::nn::{Mode, Network};
use dpfl::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

fn pattern(tape: &dpfl::nn::Tape) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = tape.decisions().iter().map(|d| d.mask.clone()).collect();
    out.push(tape.activation_pattern());
    out
}

fn selections(net: &Network, params: &ParamSet, gates: Option<&ParamSet>, x: &Tensor) -> Vec<Vec<bool>> {
    let mut p = params.clone();
    let f = net.forward(&mut p, gates, x, Mode::Train).unwrap();
    pattern(&f.tape)
}

fn loss(net: &Network, params: &ParamSet, gates: Option<&ParamSet>, x: &Tensor, labels: &[usize]) -> (f64, Vec<Vec<bool>>) {
    let mut p = params.clone();
    let mut f = net.forward(&mut p, gates, x, Mode::Train).unwrap();
    let masks = pattern(&f.tape);
    (f.loss(net, labels).unwrap().total, masks)
}

/// Analytic gradients of the total training loss for `params` and `gates`.
pub fn analytic(
    net: &Network,
    params: &ParamSet,
    gates: Option<&ParamSet>,
    x: &Tensor,
    labels: &[usize],
    seed: f64,
) -> (ParamSet, Option<ParamSet>) {
    let mut p = params.clone();
    p.zero_grad();
    let mut g = gates.cloned();
    if let Some(g) = g.as_mut() {
        g.zero_grad();
    }
    let mut f = net.forward(&mut p, g.as_ref(), x, Mode::Train).unwrap();
    f.loss(net, labels).unwrap();
    net.backward(&mut f.tape, seed, &mut p, g.as_mut()).unwrap();
    (p, g)
}

/// Central-difference check of every trainable backbone and gate scalar.
/// Coordinates whose perturbation changes a gate selection or crosses a ReLU
/// kink are skipped.
pub fn fd_check(
    net: &Network,
    params: &ParamSet,
    gates: Option<&ParamSet>,
    x: &Tensor,
    labels: &[usize],
    h: f64,
) -> FdReport {
    let (gp, gg) = analytic(net, params, gates, x, labels, 1.0);
    let base = selections(net, params, gates, x);
    let mut report = FdReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut record = |name: String, a: f64, lp: (f64, Vec<Vec<bool>>), lm: (f64, Vec<Vec<bool>>)| {
        if lp.1 != base || lm.1 != base {
            report.skipped += 1;
            return;
        }
        let n = (lp.0 - lm.0) / (2.0 * h);
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel {
            report.max_rel = e;
            report.worst = format!("{name}: analytic {a:e} numeric {n:e}");
        }
    };
    for i in 0..params.len() {
        if !params.param(i).trainable {
            continue;
        }
        for j in 0..params.param(i).value.len() {
            let mut p = params.clone();
            let v = p.param(i).value.data()[j];
            p.param_mut(i).value.data_mut()[j] = v + h;
            let lp = loss(net, &p, gates, x, labels);
            p.param_mut(i).value.data_mut()[j] = v - h;
            let lm = loss(net, &p, gates, x, labels);
            record(format!("{}[{j}]", params.name(i)), gp.param(i).grad.data()[j], lp, lm);
        }
    }
    if let (Some(gates), Some(gg)) = (gates, gg.as_ref()) {
        for i in 0..gates.len() {
            for j in 0..gates.param(i).value.len() {
                let mut g = gates.clone();
                let v = g.param(i).value.data()[j];
                g.param_mut(i).value.data_mut()[j] = v + h;
                let lp = loss(net, params, Some(&g), x, labels);
                g.param_mut(i).value.data_mut()[j] = v - h;
                let lm = loss(net, params, Some(&g), x, labels);
                record(format!("{}[{j}]", gates.name(i)), gg.param(i).grad.data()[j], lp, lm);
            }
        }
    }
    report
}

//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{fd_check, random_input};
use dpfl::data::{class_histogram, dirichlet_partition, mean_chi_square, LabeledDataset, Partition, PartitionSpec, SynthSpec};
use dpfl::experiment::{self, DatasetConfig, ExperimentConfig, SweepGrid};
use dpfl::fed::{
    centralized_curve, client_rng, client_update, update_control, weighted_average, ClientState, ControlDenominator,
    Federation, FlConfig, Objective, Strategy,
};
use dpfl::gate::{GateConfig, KeepPolicy};
use dpfl::metrics::{self, comm_cost, rounds_to_target, RoundMetrics};
use dpfl::nn::{cosine_lr, sgd_step, Mode, ModelSpec, Network};
use dpfl::{Param, ParamSet, Precision, Tensor};
use rand::seq::SliceRandom;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gated_vgg(keep: KeepPolicy, layers: Option<Vec<&str>>, lasso: f64) -> Network {
    let cfg = GateConfig {
        keep,
        lasso,
        layers: layers.map(|l| l.into_iter().map(String::from).collect()),
    };
    Network::new(ModelSpec::preset("tiny-vgg").unwrap(), Some(&cfg)).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let net = gated_vgg(KeepPolicy::Default, Some(vec!["block2.conv", "block3.conv"]), 0.05);
    check(net.gate_slots().len() == 2, "expected two gated convolutions")?;
    let params = net.init_params(21);
    let gates = net.init_gates(22);
    let x = random_input(&[2, 3, 8, 8], 23);
    let r = fd_check(&net, &params, Some(&gates), &x, &[1, 3], 1e-5);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err {:.2e} over {} coordinates ({} skipped at kinks), {secs:.1}s",
        r.max_rel, r.checked, r.skipped
    );
    check(r.max_rel < 1e-4, format!("{detail}; worst {}", r.worst))?;
    check(r.skipped * 20 < r.checked, format!("{detail}; too many skipped"))?;
    check(secs < 60.0, format!("{detail}; over 60s"))?;
    Ok(detail)
}

fn exactly_k() -> Outcome {
    let net = gated_vgg(KeepPolicy::Default, None, 5e-3);
    let mut params = net.init_params(31);
    let mut gates = net.init_gates(32);
    let keeps: Vec<usize> = net.gate_slots().iter().map(|s| s.spec.keep).collect();
    let (mut samples, mut zero_filters) = (0, 0);
    for chunk in 0..50u64 {
        let x = random_input(&[20, 3, 8, 8], 3000 + chunk);
        let labels: Vec<usize> = (0..20).map(|i| (i + chunk as usize) % 4).collect();
        let mut f = net.forward(&mut params, Some(&gates), &x, Mode::Train).map_err(|e| e.to_string())?;
        f.loss(&net, &labels).map_err(|e| e.to_string())?;
        let decisions: Vec<_> = f.tape.decisions().into_iter().cloned().collect();
        // relu k follows block k; blocks 2..4 are gated.
        let outputs: Vec<Tensor> = f.tape.relu_inputs()[1..].iter().map(|t| (*t).clone()).collect();
        for ((d, &k), out) in decisions.iter().zip(&keeps).zip(&outputs) {
            let c = d.channels();
            let plane = out.len() / (20 * c);
            for (b, sel) in d.selected.iter().enumerate() {
                check(sel.len() == k, format!("{}: {} selected, keep {k}", d.layer, sel.len()))?;
                check(sel.windows(2).all(|w| w[0] < w[1]), format!("{}: selection not sorted", d.layer))?;
                for ch in (0..c).filter(|ch| !sel.contains(ch)) {
                    let slice = &out.data()[(b * c + ch) * plane..][..plane];
                    check(slice.iter().all(|&v| v == 0.0), format!("{}: dropped channel {ch} not zero", d.layer))?;
                }
            }
        }
        params.zero_grad();
        gates.zero_grad();
        net.backward(&mut f.tape, 1.0, &mut params, Some(&mut gates)).map_err(|e| e.to_string())?;
        for d in &decisions {
            let w = params.get(&format!("{}.weight", d.layer)).unwrap();
            let used = d.union();
            let per = w.grad.len() / used.len();
            for (ch, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
                check(
                    w.grad.data()[ch * per..][..per].iter().all(|&g| g == 0.0),
                    format!("{}: unselected filter {ch} has gradient", d.layer),
                )?;
                zero_filters += 1;
            }
        }
        samples += 20;
    }
    Ok(format!("{samples} inputs, {zero_filters} never-selected filters with zero gradient"))
}

fn synth(per_class: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    SynthSpec {
        per_class,
        test_per_class: 10,
        seed,
        ..SynthSpec::default()
    }
    .generate()
    .unwrap()
}

/// Plain minibatch SGD over the single client's shard with the same
/// shuffling stream and schedule.
fn sequential_sgd(net: &Network, data: &LabeledDataset, shard: &[usize], cfg: &FlConfig, rounds: usize, seed: u64) -> (ParamSet, Option<ParamSet>) {
    let mut w = net.init_params(dpfl::fed::model_seed(seed));
    let mut g = cfg.dynamic_pruning.then(|| net.init_gates(dpfl::fed::gate_seed(seed, 0)));
    let mut rng = client_rng(seed, 0);
    for _ in 0..rounds {
        let mut order = shard.to_vec();
        for epoch in 0..cfg.local_epochs {
            let lr = cosine_lr(cfg.lr, epoch, cfg.local_epochs);
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (x, y) = data.batch(batch);
                w.zero_grad();
                if let Some(g) = g.as_mut() {
                    g.zero_grad();
                }
                let mut f = net.forward(&mut w, g.as_ref(), &x, Mode::Train).unwrap();
                f.loss(net, &y).unwrap();
                net.backward(&mut f.tape, 1.0, &mut w, g.as_mut()).unwrap();
                sgd_step(&mut w, lr, cfg.weight_decay, None).unwrap();
                if let Some(g) = g.as_mut() {
                    sgd_step(g, lr, cfg.weight_decay, None).unwrap();
                }
            }
        }
    }
    (w, g)
}

fn scaffold_degeneracy() -> Outcome {
    let (train, test) = synth(15, 7);
    let mut notes = Vec::new();
    for pruning in [false, true] {
        let net = if pruning {
            gated_vgg(KeepPolicy::Default, None, 5e-3)
        } else {
            Network::new(ModelSpec::preset("tiny-vgg").unwrap(), None).unwrap()
        };
        let part = dirichlet_partition(
            &train,
            &PartitionSpec {
                num_clients: 1,
                validation_fraction: 0.0,
                ..PartitionSpec::default()
            },
        )
        .unwrap();
        let cfg = FlConfig {
            strategy: Strategy::Scaffold,
            dynamic_pruning: pruning,
            local_epochs: 2,
            batch_size: 8,
            sample_rate: 1.0,
            control_denominator: ControlDenominator::TotalSteps,
            ..FlConfig::default()
        };
        let mut fed = Federation::new(&net, &train, &test, &part, cfg.clone(), 5).unwrap();
        for _ in 0..5 {
            fed.round().map_err(|e| e.to_string())?;
        }
        let (w, g) = sequential_sgd(&net, &train, &part.clients[0].train, &cfg, 5, 5);
        check(fed.server.w.bitwise_eq(&w), format!("N=1 (pruning {pruning}): weights differ from sequential SGD"))?;
        if let Some(g) = g {
            check(fed.clients[0].gates.as_ref().unwrap().bitwise_eq(&g), "N=1: gates differ")?;
        }
        notes.push(if pruning { "N=1 pruned" } else { "N=1 dense" });
    }

    let net = Network::new(ModelSpec::preset("tiny-vgg").unwrap(), None).unwrap();
    let part = dirichlet_partition(&train, &PartitionSpec { num_clients: 4, beta: 0.5, ..PartitionSpec::default() }).unwrap();
    let base = FlConfig {
        dynamic_pruning: false,
        local_epochs: 1,
        sample_rate: 0.5,
        ..FlConfig::default()
    };
    let run = |cfg: FlConfig| {
        let mut fed = Federation::new(&net, &train, &test, &part, cfg, 9).unwrap();
        for _ in 0..5 {
            fed.round().unwrap();
        }
        fed.server.w.clone()
    };
    let frozen = run(FlConfig {
        strategy: Strategy::Scaffold,
        freeze_control_variates: true,
        ..base.clone()
    });
    let fedavg = run(FlConfig {
        strategy: Strategy::FedAvg,
        ..base
    });
    check(frozen.bitwise_eq(&fedavg), "zero-variate SCAFFOLD differs from FedAvg")?;
    notes.push("zero-variate == FedAvg");
    Ok(format!("5 rounds bitwise identical: {}", notes.join(", ")))
}

fn scalar(v: f64) -> ParamSet {
    let mut s = ParamSet::new();
    s.push("w", Param::new(Tensor::scalar(v))).unwrap();
    s
}

struct ConstGrad(f64);

impl Objective for ConstGrad {
    fn loss_and_grad(&self, p: &mut ParamSet, _: Option<&mut ParamSet>, _: &[usize]) -> dpfl::Result<f64> {
        p.param_mut(0).grad.data_mut()[0] += self.0;
        Ok(0.0)
    }
}

fn round_arithmetic() -> Outcome {
    let cfg = FlConfig {
        strategy: Strategy::Scaffold,
        dynamic_pruning: false,
        local_epochs: 1,
        lr: 0.1,
        batch_size: 1,
        weight_decay: 0.0,
        ..FlConfig::default()
    };
    let mut client = ClientState::new(0, vec![0], vec![], &scalar(0.0), None, 0);
    let r = client_update(&mut client, 1, &scalar(1.0), &scalar(0.0), &cfg, &ConstGrad(2.0)).map_err(|e| e.to_string())?;
    let wk = r.weights.param(0).value.data()[0];
    let ck = r.c_delta.param(0).value.data()[0];
    check(wk == 0.8 && ck == 2.0, format!("w_k = {wk}, c_k = {ck}"))?;
    let mut c_g = scalar(0.0);
    update_control(&mut c_g, &[&scalar(5.0), &scalar(5.0)], 10).map_err(|e| e.to_string())?;
    let cg = c_g.param(0).value.data()[0];
    check(cg == 1.0, format!("c_g advanced by {cg}"))?;
    let avg = weighted_average(&[&scalar(0.8)], &[1.0]).map_err(|e| e.to_string())?;
    check(avg.param(0).value.data()[0] == 0.8, "single-client aggregate moved")?;
    Ok(format!("w_k = {wk}, c_k = {ck}, c_g += {cg}"))
}

fn flops_ratio() -> Outcome {
    let mut parts = Vec::new();
    for preset in ["tiny-vgg", "vgg11-shape"] {
        let net = Network::new(ModelSpec::preset(preset).unwrap(), Some(&GateConfig::default())).unwrap();
        let full = metrics::model_flops(&net, None).map_err(|e| e.to_string())?;
        let ratio = metrics::keep_flops(&net) as f64 / full as f64;
        check((ratio - 0.5).abs() <= 0.02, format!("{preset}: ratio {ratio:.4}"))?;
        let spec = net.spec();
        let batch = if preset == "tiny-vgg" { 6 } else { 1 };
        let mut shape = vec![batch];
        shape.extend(spec.input);
        let mut params = net.init_params(41);
        let gates = net.init_gates(42);
        let f = net
            .forward(&mut params, Some(&gates), &random_input(&shape, 43), Mode::Eval)
            .map_err(|e| e.to_string())?;
        let analytic: u64 = (0..batch)
            .map(|b| metrics::model_flops(&net, Some(&f.tape.sample_decisions(b))).unwrap())
            .sum();
        check(
            f.tape.measured_flops() == analytic,
            format!("{preset}: measured {} vs analytic {analytic}", f.tape.measured_flops()),
        )?;
        check(analytic == batch as u64 * metrics::keep_flops(&net), format!("{preset}: per-sample count varies"))?;
        parts.push(format!("{preset} {ratio:.4}"));
    }
    Ok(format!("pruned/original: {}; measured == analytic", parts.join(", ")))
}

fn partition_properties() -> Outcome {
    let (train, _) = synth(250, 0);
    let counts = train.class_counts();
    let mut margin = f64::INFINITY;
    for seed in 0..20 {
        let spec = |beta: f64| PartitionSpec {
            num_clients: 8,
            beta,
            seed,
            validation_fraction: 0.1,
        };
        let skewed = dirichlet_partition(&train, &spec(0.1)).map_err(|e| e.to_string())?;
        let mut seen = vec![0u8; train.len()];
        for c in &skewed.clients {
            for &i in c.train.iter().chain(&c.validation) {
                seen[i] += 1;
            }
        }
        check(seen.iter().all(|&s| s == 1), format!("seed {seed}: a sample is not assigned exactly once"))?;
        let hist = class_histogram(&train, &skewed);
        for (k, &n) in counts.iter().enumerate() {
            let total: usize = hist.iter().map(|h| h[k]).sum();
            check(total == n, format!("seed {seed}: class {k} blocks sum to {total}, not {n}"))?;
        }
        let flat = dirichlet_partition(&train, &spec(100.0)).map_err(|e| e.to_string())?;
        let (a, b) = (mean_chi_square(&train, &skewed), mean_chi_square(&train, &flat));
        check(a > b, format!("seed {seed}: chi-square {a:.4} at 0.1 vs {b:.4} at 100"))?;
        margin = margin.min(a - b);
    }
    Ok(format!("20 seeds; smallest chi-square gap {margin:.4}"))
}

fn communication() -> Outcome {
    let c = comm_cost(1_000_000, Some(100), 10, 0.4);
    check(c.total_cost == 4e8 && c.total_bytes == 1.6e9, format!("{} uploads, {} bytes", c.total_cost, c.total_bytes))?;

    let (train, test) = synth(15, 3);
    let part = dirichlet_partition(&train, &PartitionSpec { num_clients: 4, beta: 0.5, ..PartitionSpec::default() }).unwrap();
    for (strategy, pruning) in [(Strategy::Scaffold, true), (Strategy::FedAvg, false), (Strategy::FedProx, true)] {
        let net = if pruning {
            gated_vgg(KeepPolicy::Default, None, 5e-3)
        } else {
            Network::new(ModelSpec::preset("tiny-vgg").unwrap(), None).unwrap()
        };
        let cfg = FlConfig {
            strategy,
            dynamic_pruning: pruning,
            local_epochs: 1,
            sample_rate: 0.5,
            ..FlConfig::default()
        };
        let mut fed = Federation::new(&net, &train, &test, &part, cfg, 1).unwrap();
        let mut last = None;
        for _ in 0..3 {
            last = Some(fed.round().map_err(|e| e.to_string())?);
        }
        let b = last.unwrap().bytes;
        let blob = net.param_template().encoded_len(Precision::F32) as u64;
        let weights = 3 * 2 * blob;
        let variates = if strategy == Strategy::Scaffold { weights } else { 0 };
        check(
            b.up_weights == weights && b.down_weights == weights,
            format!("{strategy}: weight bytes {} / {} vs {weights}", b.up_weights, b.down_weights),
        )?;
        check(
            b.up_variates == variates && b.down_variates == variates,
            format!("{strategy}: variate bytes {} vs {variates}", b.up_variates),
        )?;
        check(b.up_gates == 0 && b.down_gates == 0, format!("{strategy}: gate bytes reported"))?;
    }
    Ok("4e8 uploads = 1.6e9 bytes; 3-round ledgers match closed form; zero gate bytes".into())
}

struct SeedResult {
    ceiling: f64,
    pruned_target: Option<usize>,
    pruned_ninety: Option<usize>,
    fedavg_target: Option<usize>,
}

const MAX_ROUNDS: usize = 50;

/// Rounds until `stop` holds on the accuracy, or `MAX_ROUNDS`.
fn train_until(fed: &mut Federation, stop: impl Fn(f64) -> bool) -> Vec<f64> {
    let mut acc = Vec::new();
    for _ in 0..MAX_ROUNDS {
        let m: RoundMetrics = fed.round().unwrap();
        acc.push(m.avg_local_top1);
        if stop(m.avg_local_top1) {
            break;
        }
    }
    acc
}

fn desk_seed(seed: u64) -> SeedResult {
    let (train, test) = synth(250, seed);
    let part: Partition = dirichlet_partition(
        &train,
        &PartitionSpec {
            num_clients: 8,
            beta: 0.1,
            seed,
            validation_fraction: 0.1,
        },
    )
    .unwrap();
    let pooled_train: Vec<usize> = part.clients.iter().flat_map(|c| c.train.iter().copied()).collect();
    let pooled_val: Vec<usize> = part.clients.iter().flat_map(|c| c.validation.iter().copied()).collect();
    let dense = Network::new(ModelSpec::preset("tiny-vgg").unwrap(), None).unwrap();
    let gated = gated_vgg(KeepPolicy::Default, None, 5e-3);
    let base = FlConfig {
        control_denominator: ControlDenominator::TotalSteps,
        ..FlConfig::default()
    };

    let pilot = FlConfig {
        dynamic_pruning: false,
        lr: 0.05,
        ..base.clone()
    };
    let curve = centralized_curve(&dense, &train, &pooled_train, &pooled_val, &pilot, 30, seed).unwrap();
    let ceiling = curve.iter().copied().fold(0.0, f64::max);

    let pruned = FlConfig {
        strategy: Strategy::Scaffold,
        dynamic_pruning: true,
        ..base.clone()
    };
    let mut fed = Federation::new(&gated, &train, &test, &part, pruned, seed).unwrap();
    let acc = train_until(&mut fed, |a| a >= 0.9 * ceiling);
    let pruned_target = rounds_to_target(acc.iter().copied(), 0.8 * ceiling);
    let pruned_ninety = rounds_to_target(acc.iter().copied(), 0.9 * ceiling);

    let fedavg = FlConfig {
        strategy: Strategy::FedAvg,
        dynamic_pruning: false,
        ..base
    };
    let mut fed = Federation::new(&dense, &train, &test, &part, fedavg, seed).unwrap();
    let acc = train_until(&mut fed, |a| a >= 0.8 * ceiling);
    SeedResult {
        ceiling,
        pruned_target,
        pruned_ninety,
        fedavg_target: rounds_to_target(acc, 0.8 * ceiling),
    }
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn desk_learning() -> Outcome {
    let start = Instant::now();
    let results: Vec<SeedResult> = (0..5).map(desk_seed).collect();
    let show = |r: Option<usize>| r.map_or("-".to_string(), |n| n.to_string());
    let table: Vec<String> = results
        .iter()
        .enumerate()
        .map(|(s, r)| {
            format!(
                "s{s}: ceiling {:.3} pruned SCAFFOLD {}/{} dense FedAvg {}",
                r.ceiling,
                show(r.pruned_target),
                show(r.pruned_ninety),
                show(r.fedavg_target)
            )
        })
        .collect();
    let unreached = MAX_ROUNDS + 1;
    let dp = median(results.iter().map(|r| r.pruned_target.unwrap_or(unreached)).collect());
    let avg = median(results.iter().map(|r| r.fedavg_target.unwrap_or(unreached)).collect());
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "median rounds to 80% of ceiling: pruned SCAFFOLD {dp}, dense FedAvg {avg}; {} ({secs:.0}s)",
        table.join("; ")
    );
    check(results.iter().all(|r| r.pruned_ninety.is_some()), format!("(a) 90% not reached: {detail}"))?;
    check(dp <= avg, format!("(b) {detail}"))?;
    check(secs < 1800.0, format!("over 30 min: {detail}"))?;
    Ok(detail)
}

fn controlled_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        name: "ablation".into(),
        dataset: DatasetConfig::Synthetic(SynthSpec {
            per_class: 20,
            test_per_class: 5,
            ..SynthSpec::default()
        }),
        partition: PartitionSpec {
            num_clients: 4,
            beta: 0.5,
            ..PartitionSpec::default()
        },
        fl: FlConfig {
            rounds: 2,
            local_epochs: 1,
            control_denominator: ControlDenominator::TotalSteps,
            ..FlConfig::default()
        },
        sweep: SweepGrid::default(),
        ..ExperimentConfig::default()
    };
    let cells = experiment::sweep(&cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    check(cells.len() == 8, format!("{} cells", cells.len()))?;
    let hash = &cells[0].summary.partition_sha256;
    check(cells.iter().all(|c| &c.summary.partition_sha256 == hash), "partition hashes differ")?;
    let files: Vec<Vec<u8>> = cells
        .iter()
        .map(|c| std::fs::read(c.dir.join(experiment::PARTITION_FILE)).unwrap())
        .collect();
    check(files.windows(2).all(|w| w[0] == w[1]), "partition files differ")?;
    let mut r = csv::Reader::from_path(dir.path().join(experiment::SWEEP_FILE)).map_err(|e| e.to_string())?;
    let mut groups = std::collections::BTreeSet::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        groups.insert((rec[1].to_string(), rec[2].to_string()));
        rows += 1;
    }
    check(groups.len() == 8 && rows == 16, format!("{} groups, {rows} rows", groups.len()))?;
    Ok(format!("8 cells, one partition hash {}..., 8 groups in sweep.csv", &hash[..12]))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 exactly-K fuzz", exactly_k),
        ("3 SCAFFOLD degeneracy", scaffold_degeneracy),
        ("4 round arithmetic", round_arithmetic),
        ("5 FLOPs ratio", flops_ratio),
        ("6 partition properties", partition_properties),
        ("7 communication formula", communication),
        ("8 desk-scale learning", desk_learning),
        ("9 controlled ablation", controlled_ablation),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

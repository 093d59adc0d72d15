use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dpfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfl"))
        .args(args)
        .env_remove("DPFL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn tiny(extra: Value) -> Value {
    let mut cfg = json!({
        "name": "t",
        "dataset": {"kind": "synthetic", "per_class": 20, "test_per_class": 5},
        "partition": {"num_clients": 4, "beta": 0.5},
        "fl": {"rounds": 2, "local_epochs": 1, "control_denominator": "total_steps"}
    });
    merge(&mut cfg, extra);
    cfg
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(json!({})));
    let out = dir.path().join("out");
    let o = dpfl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("run_id,strategy,pruning,round,avg_local_top1"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 2);
    assert!(summary["cost"]["total_cost"].is_number());
    assert!(out.join("partition.json").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(json!({})));
    let read = |name: &str| {
        let out = dir.path().join(name);
        let o = dpfl(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn seed_flag_changes_the_partition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(json!({})));
    let hash = |seed: &str| {
        let out = dir.path().join(seed);
        let o = dpfl(&["partition", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("partition.json")).unwrap()
    };
    assert_eq!(hash("1"), hash("1"));
    assert_ne!(hash("1"), hash("2"));
}

#[test]
fn bad_fields_exit_2_with_their_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(json!({"fl": {"sample_rate": 1.5}, "partition": {"beta": 0}})));
    let o = dpfl(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("fl.sample_rate") && err.contains("partition.beta"), "{err}");
    assert!(!dir.path().join("metrics.csv").exists());

    let cfg = write_config(dir.path(), &json!({"fl": {"rounds": -1}}));
    let o = dpfl(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fl.rounds"), "{}", stderr(&o));

    let o = dpfl(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &tiny(json!({"fl": {"lr": 1e12, "strategy": "fedavg", "dynamic_pruning": false, "rounds": 5}})),
    );
    let o = dpfl(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("round") && err.contains("client"), "{err}");
}

#[test]
fn env_var_sets_the_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(json!({})));
    let root = dir.path().join("env-root");
    let o = Command::new(env!("CARGO_BIN_EXE_dpfl"))
        .args(["partition", "--config", &cfg])
        .env("DPFL_OUT_DIR", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("partition.json").is_file());
}

fn histogram(dir: &Path, extra: Value) -> Vec<Vec<usize>> {
    let cfg = write_config(dir, &tiny(extra));
    let out = dir.join("part");
    let o = dpfl(&["partition", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("histogram.csv")).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().skip(1).map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn partition_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let one = histogram(dir.path(), json!({"partition": {"num_clients": 1}}));
    assert_eq!(one, vec![vec![20, 20, 20, 20, 80]]);

    let rows = histogram(
        dir.path(),
        json!({"partition": {"num_clients": 4, "beta": 1e6}, "dataset": {"per_class": 200}}),
    );
    assert_eq!(rows.iter().map(|r| r[4]).sum::<usize>(), 800);
    for r in &rows {
        for &count in &r[..4] {
            let share = count as f64 / r[4] as f64;
            assert!((share - 0.25).abs() <= 0.05, "{rows:?}");
        }
    }
}

#[test]
fn flops_table() {
    let o = dpfl(&["flops", "--model", "tiny-vgg", "--keep-ratio", "1.0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reduction 0.00%"), "{}", stdout(&o));

    let o = dpfl(&["flops", "--model", "vgg11-shape"]);
    let text = stdout(&o);
    let pct: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("reduction "))
        .and_then(|p| p.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!((pct - 50.0).abs() <= 2.0, "{text}");

    let o = dpfl(&["flops", "--model", "alexnet"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn restricted_sweep_runs_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &tiny(json!({"fl": {"rounds": 1}, "sweep": {"strategies": ["fedavg"], "pruning": [false]}})),
    );
    let out = dir.path().join("sweep");
    let o = dpfl(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("fedavg-dense/metrics.csv").is_file());
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

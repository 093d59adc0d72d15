//! Config-driven experiment runs: single runs, partition export, FLOPs
//! tables and the strategy x pruning sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{class_histogram, dirichlet_partition, load_cifar10, LabeledDataset, Partition, PartitionSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::fed::{Federation, FlConfig, Strategy};
use crate::gate::{GateConfig, KeepPolicy};
use crate::metrics::{self, comm_cost, rounds_to_target, MetricsCsv, RoundMetrics, RunSummary};
use crate::nn::{ModelSpec, Network, PRESETS};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SynthSpec),
    Cifar10 {
        path: PathBuf,
        /// Use only the first `n` training images.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SynthSpec::default())
    }
}

impl DatasetConfig {
    fn input_and_classes(&self) -> ([usize; 3], usize) {
        match self {
            DatasetConfig::Synthetic(s) => (s.image, s.classes),
            DatasetConfig::Cifar10 { .. } => ([3, 32, 32], 10),
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            DatasetConfig::Synthetic(s) => {
                if s.classes < 2 {
                    v.push("dataset.classes: must be at least 2".into());
                }
                if s.per_class == 0 {
                    v.push("dataset.per_class: must be at least 1".into());
                }
                if s.test_per_class == 0 {
                    v.push("dataset.test_per_class: must be at least 1".into());
                }
                if s.image.contains(&0) {
                    v.push("dataset.image: extents must be positive".into());
                }
                if !(s.noise >= 0.0 && s.noise.is_finite()) {
                    v.push(format!("dataset.noise: must be >= 0, got {}", s.noise));
                }
            }
            DatasetConfig::Cifar10 {
                path,
                train_limit,
                test_limit,
            } => {
                if !path.is_dir() {
                    v.push(format!("dataset.path: `{}` is not a directory", path.display()));
                }
                if *train_limit == Some(0) {
                    v.push("dataset.train_limit: must be at least 1".into());
                }
                if *test_limit == Some(0) {
                    v.push("dataset.test_limit: must be at least 1".into());
                }
            }
        }
        v
    }

    /// Training and test sets.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetConfig::Synthetic(s) => s.generate(),
            DatasetConfig::Cifar10 {
                path,
                train_limit,
                test_limit,
            } => {
                let (train, test) = load_cifar10(path)?;
                Ok((truncate(train, *train_limit)?, truncate(test, *test_limit)?))
            }
        }
    }
}

fn truncate(ds: LabeledDataset, limit: Option<usize>) -> Result<LabeledDataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let images = (0..n).flat_map(|i| ds.image(i).iter().copied()).collect();
            LabeledDataset::new(images, ds.shape(), ds.labels()[..n].to_vec(), ds.classes())
        }
        _ => Ok(ds),
    }
}

/// Which strategy x pruning cells a sweep runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub strategies: Vec<Strategy>,
    pub pruning: Vec<bool>,
    /// Run cells concurrently instead of one after another.
    pub parallel: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            pruning: vec![false, true],
            parallel: false,
        }
    }
}

/// Everything one experiment needs. Every field has a default, so `{}` is
/// the desk-scale preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// A preset name or the path of a model spec JSON file.
    pub model: String,
    pub dataset: DatasetConfig,
    pub partition: PartitionSpec,
    pub fl: FlConfig,
    pub gates: GateConfig,
    /// Accuracy (avg local top-1) that defines rounds-to-target.
    pub target_accuracy: f64,
    /// Seeds model initialization, gate initialization, client sampling and
    /// local shuffling.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Fill the `seconds` column; off keeps reruns byte-identical.
    pub timing: bool,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            model: "tiny-vgg".into(),
            dataset: DatasetConfig::default(),
            partition: PartitionSpec::default(),
            fl: FlConfig::default(),
            gates: GateConfig::default(),
            target_accuracy: 0.78,
            seed: 0,
            output_dir: None,
            timing: false,
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON; type errors name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces both the run seed and the partition seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.partition.seed = seed;
        self
    }

    /// Every problem with the config, each prefixed by its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            v.push(format!("name: must be a non-empty file name, got `{}`", self.name));
        }
        v.extend(self.dataset.violations());
        let p = &self.partition;
        if p.num_clients == 0 {
            v.push("partition.num_clients: must be at least 1".into());
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            v.push(format!("partition.beta: must be positive and finite, got {}", p.beta));
        }
        if !(0.0..1.0).contains(&p.validation_fraction) {
            v.push(format!(
                "partition.validation_fraction: must lie in [0, 1), got {}",
                p.validation_fraction
            ));
        }
        v.extend(self.fl.violations().into_iter().map(|m| format!("fl.{m}")));
        if !(self.gates.lasso >= 0.0 && self.gates.lasso.is_finite()) {
            v.push(format!("gates.lasso: must be >= 0, got {}", self.gates.lasso));
        }
        if let KeepPolicy::Uniform(r) = self.gates.keep {
            if !(r > 0.0 && r <= 1.0) {
                v.push(format!("gates.keep.uniform: must be in (0, 1], got {r}"));
            }
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            v.push(format!("target_accuracy: must be in (0, 1], got {}", self.target_accuracy));
        }
        if self.sweep.strategies.is_empty() {
            v.push("sweep.strategies: must not be empty".into());
        }
        if self.sweep.pruning.is_empty() {
            v.push("sweep.pruning: must not be empty".into());
        }
        if self.dataset.violations().is_empty() {
            if let Err(e) = self.network(true) {
                v.push(format!("model: {}", bare(&e)));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("\n")))
        }
    }

    /// Model spec sized for the configured dataset.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let (input, classes) = self.dataset.input_and_classes();
        resolve_model(&self.model, input, classes)
    }

    /// The network, with gates when `pruning` is set.
    pub fn network(&self, pruning: bool) -> Result<Network> {
        let spec = self.model_spec()?;
        Network::new(spec, pruning.then_some(&self.gates))
    }

    fn out_dir(&self, out: Option<&Path>) -> PathBuf {
        out.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Error message without the variant prefix.
fn bare(e: &Error) -> String {
    match e {
        Error::Structural(m) | Error::Config(m) | Error::Numeric(m) | Error::Usage(m) | Error::Partition(m) | Error::Format(m) => {
            m.clone()
        }
        other => other.to_string(),
    }
}

/// A preset name, or a path to a model spec JSON file, sized for `input`
/// and `classes` (file specs must already match them).
pub fn resolve_model(model: &str, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
    if PRESETS.contains(&model) {
        let spec = ModelSpec::preset_with(model, input, classes)?;
        spec.validate()?;
        return Ok(spec);
    }
    let path = Path::new(model);
    if !path.is_file() {
        return Err(unknown_model(model));
    }
    let spec = load_model_spec(path)?;
    if spec.input != input || spec.num_classes != classes {
        return Err(Error::Config(format!(
            "model `{}` expects input {:?} and {} classes, dataset has {:?} and {}",
            spec.name, spec.input, spec.num_classes, input, classes
        )));
    }
    Ok(spec)
}

/// A model spec from a JSON file, validated.
pub fn load_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: ModelSpec = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
    spec.validate()?;
    Ok(spec)
}

/// A preset at its natural input size, or a model spec file.
pub fn named_model(model: &str) -> Result<ModelSpec> {
    if PRESETS.contains(&model) {
        return ModelSpec::preset(model);
    }
    if Path::new(model).is_file() {
        return load_model_spec(Path::new(model));
    }
    Err(unknown_model(model))
}

fn unknown_model(model: &str) -> Error {
    Error::Config(format!(
        "unknown model `{model}`; expected one of {} or a model spec file",
        PRESETS.join(", ")
    ))
}

/// Loaded data and partition shared by the runs of one config.
pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let partition = dirichlet_partition(&train, &cfg.partition)?;
    Ok(Prepared { train, test, partition })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<RoundMetrics>,
    pub summary: RunSummary,
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{}-{}-s{}",
        cfg.name,
        cfg.fl.strategy,
        if cfg.fl.dynamic_pruning { "pruned" } else { "dense" },
        cfg.seed
    )
}

/// Trains `cfg.fl.rounds` rounds, streaming rows to `dir/metrics.csv`, then
/// writes the summary and the partition used.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared, &cfg.out_dir(out))
}

pub fn run_prepared(cfg: &ExperimentConfig, data: &Prepared, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let net = cfg.network(cfg.fl.dynamic_pruning)?;
    let id = run_id(cfg);
    data.partition.write_json(&dir.join(PARTITION_FILE))?;
    let mut csv = MetricsCsv::create(
        &dir.join(METRICS_FILE),
        &id,
        cfg.fl.strategy.name(),
        cfg.fl.dynamic_pruning,
        cfg.timing,
    )?;
    let mut fed = Federation::new(&net, &data.train, &data.test, &data.partition, cfg.fl.clone(), cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.fl.rounds);
    for _ in 0..cfg.fl.rounds {
        let m = fed.round()?;
        csv.write(&m)?;
        rows.push(m);
    }
    let summary = summarize(cfg, &net, &data.partition, &id, &rows)?;
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        rows,
        summary,
    })
}

fn summarize(cfg: &ExperimentConfig, net: &Network, partition: &Partition, id: &str, rows: &[RoundMetrics]) -> Result<RunSummary> {
    let last = rows.last().ok_or_else(|| Error::Config("fl.rounds: must be at least 1".into()))?;
    let reached = rounds_to_target(rows.iter().map(|r| r.avg_local_top1), cfg.target_accuracy);
    let n = cfg.partition.num_clients;
    let rate = cfg.fl.sample_rate;
    let params = net.param_template().num_trainable() as u64;
    let blob = net.param_template().encoded_len(cfg.fl.precision) as f64;
    Ok(RunSummary {
        run_id: id.to_string(),
        strategy: cfg.fl.strategy.name().to_string(),
        pruning: cfg.fl.dynamic_pruning,
        rounds: rows.len(),
        target_accuracy: cfg.target_accuracy,
        final_avg_local_top1: last.avg_local_top1,
        best_avg_local_top1: rows.iter().map(|r| r.avg_local_top1).fold(0.0, f64::max),
        final_global_top1: last.global_top1,
        original_flops_per_sample: metrics::model_flops(net, None)?,
        flops_per_sample: last.flops_per_sample,
        sparsity: last.sparsity,
        bytes: last.bytes,
        partition_sha256: partition.sha256(),
        cost: comm_cost(params, reached, n, rate),
        cost_serialized_bytes: blob * reached.unwrap_or(0) as f64 * n as f64 * rate,
    })
}

/// Writes the partition JSON and a per-client class histogram CSV; returns
/// the histogram as a printable table.
pub fn partition_cmd(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<String> {
    let prepared = prepare(cfg)?;
    let dir = cfg.out_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    prepared.partition.write_json(&dir.join(PARTITION_FILE))?;
    let hist = class_histogram(&prepared.train, &prepared.partition);
    let classes = prepared.train.classes();

    let path = dir.join(HISTOGRAM_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let mut header = vec!["client".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    header.push("total".into());
    w.write_record(&header).map_err(|e| csv_err(&path, e))?;
    let mut table = header.join("\t") + "\n";
    for (id, h) in hist.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(h.iter().map(usize::to_string));
        row.push(h.iter().sum::<usize>().to_string());
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        table += &(row.join("\t") + "\n");
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let _ = writeln!(table, "sha256\t{}", prepared.partition.sha256());
    Ok(table)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsRow {
    pub layer: String,
    pub original: u64,
    pub pruned: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsTable {
    pub model: String,
    pub rows: Vec<FlopsRow>,
    pub original: u64,
    pub pruned: u64,
}

impl FlopsTable {
    /// Percentage of FLOPs removed.
    pub fn reduction_pct(&self) -> f64 {
        if self.original == 0 {
            return 0.0;
        }
        100.0 * (1.0 - self.pruned as f64 / self.original as f64)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<24} {:>16} {:>16}\n", "layer", "original", "pruned");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>16} {:>16}", r.layer, r.original, r.pruned);
        }
        let _ = writeln!(s, "{:<24} {:>16} {:>16}", "total", self.original, self.pruned);
        let _ = writeln!(s, "reduction {:.2}%", self.reduction_pct());
        s
    }
}

/// FLOPs of `spec` dense and with every gated layer at its keep count.
/// `keep_ratio` of `None` uses the default keep policy.
pub fn flops_table(spec: ModelSpec, keep_ratio: Option<f64>) -> Result<FlopsTable> {
    if let Some(r) = keep_ratio {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("keep_ratio: must be in (0, 1], got {r}")));
        }
    }
    let gates = GateConfig {
        keep: keep_ratio.map_or(KeepPolicy::Default, KeepPolicy::Uniform),
        ..GateConfig::default()
    };
    let name = spec.name.clone();
    let net = Network::new(spec, Some(&gates))?;
    let widths: Vec<usize> = net.gate_slots().iter().map(|s| s.spec.keep).collect();
    let rows: Vec<FlopsRow> = net
        .layer_costs(Some(&widths))
        .into_iter()
        .filter(|c| c.flops > 0)
        .map(|c| FlopsRow {
            layer: c.name,
            original: c.flops,
            pruned: c.active_flops,
        })
        .collect();
    Ok(FlopsTable {
        model: name,
        original: rows.iter().map(|r| r.original).sum(),
        pruned: rows.iter().map(|r| r.pruned).sum(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub pruning: bool,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Runs every grid cell on one shared partition and seed. Cell outputs go
/// to `<out>/<strategy>-<pruned|dense>/`; all rows are combined into
/// `<out>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SweepCell>> {
    let prepared = prepare(cfg)?;
    let root = cfg.out_dir(out);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let cells: Vec<(Strategy, bool)> = cfg
        .sweep
        .strategies
        .iter()
        .flat_map(|&s| cfg.sweep.pruning.iter().map(move |&p| (s, p)))
        .collect();
    let one = |&(strategy, pruning): &(Strategy, bool)| -> Result<SweepCell> {
        let mut c = cfg.clone();
        c.fl.strategy = strategy;
        c.fl.dynamic_pruning = pruning;
        let dir = root.join(format!("{}-{}", strategy, if pruning { "pruned" } else { "dense" }));
        let out = run_prepared(&c, &prepared, &dir)?;
        Ok(SweepCell {
            strategy,
            pruning,
            dir,
            summary: out.summary,
        })
    };
    let results: Vec<SweepCell> = if cfg.sweep.parallel {
        cells.par_iter().map(one).collect::<Result<_>>()?
    } else {
        cells.iter().map(one).collect::<Result<_>>()?
    };

    let path = root.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(metrics::csv_header()).map_err(|e| csv_err(&path, e))?;
    for cell in &results {
        let src = cell.dir.join(METRICS_FILE);
        let mut r = csv::Reader::from_path(&src).map_err(|e| csv_err(&src, e))?;
        for rec in r.records() {
            w.write_record(&rec.map_err(|e| csv_err(&src, e))?)
                .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = root.join(SWEEP_SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&results).expect("sweep serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

//! Command-line runner for federated experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpfl::experiment::{self, named_model, ExperimentConfig};
use dpfl::Error;

/// Default output root when neither `--out` nor the config sets one.
const OUT_ENV: &str = "DPFL_OUT_DIR";

#[derive(Parser)]
#[command(name = "dpfl", version, about = "Federated learning with dynamic channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, summary.json and partition.json.
    Run(Common),
    /// Write the client partition and its per-client class histogram.
    Partition(Common),
    /// Print original vs pruned FLOPs per layer.
    Flops(FlopsArgs),
    /// Run every strategy x pruning cell on a shared partition.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed and the partition seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Preset name or model spec file; defaults to the config's model.
    #[arg(long)]
    model: Option<String>,
    /// Uniform keep ratio for every gated layer; the default policy otherwise.
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Takes the model and dataset shape from this config.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Partition(_) | Error::Structural(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn report(e: &Error) {
    match e {
        Error::Config(msg) => {
            eprintln!("error: invalid configuration");
            for m in msg.lines() {
                eprintln!("  {m}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn dispatch(cmd: Command) -> dpfl::Result<()> {
    match cmd {
        Command::Run(c) => {
            let (cfg, out) = setup(&c)?;
            let r = experiment::run(&cfg, Some(&out))?;
            let s = &r.summary;
            println!(
                "{}: {} rounds, avg local top-1 {:.4}, global top-1 {:.4}, rounds to target {}",
                s.run_id,
                s.rounds,
                s.final_avg_local_top1,
                s.final_global_top1,
                s.cost.rounds_to_target.map_or("not reached".into(), |r| r.to_string())
            );
            println!("wrote {}", r.dir.display());
        }
        Command::Partition(c) => {
            let (cfg, out) = setup(&c)?;
            print!("{}", experiment::partition_cmd(&cfg, Some(&out))?);
            println!("wrote {}", out.display());
        }
        Command::Sweep(c) => {
            let (cfg, out) = setup(&c)?;
            let cells = experiment::sweep(&cfg, Some(&out))?;
            for cell in &cells {
                let s = &cell.summary;
                println!(
                    "{:<9} {:<7} avg local {:.4} global {:.4} rounds to target {}",
                    cell.strategy.name(),
                    if cell.pruning { "pruned" } else { "dense" },
                    s.final_avg_local_top1,
                    s.final_global_top1,
                    s.cost.rounds_to_target.map_or("-".into(), |r| r.to_string())
                );
            }
            println!("wrote {}", out.join(experiment::SWEEP_FILE).display());
        }
        Command::Flops(f) => {
            let cfg = match &f.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let spec = match (&f.model, &f.config) {
                (None, _) => cfg.model_spec()?,
                (Some(m), Some(_)) => ExperimentConfig { model: m.clone(), ..cfg }.model_spec()?,
                (Some(m), None) => named_model(m)?,
            };
            print!("{}", experiment::flops_table(spec, f.keep_ratio)?.render());
        }
    }
    Ok(())
}

fn setup(c: &Common) -> dpfl::Result<(ExperimentConfig, PathBuf)> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

//! `diffrep <task> --config run.toml [--seed N] [--out DIR] [--workers N] [--set key=value]...`
//!
//! Exit codes: 0 on success, 1 when the run fails (one `error:` line on
//! stderr), 2 for usage errors and unreadable config files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffrep::harness::config::{ExperimentConfig, Task};
use diffrep::harness::run::run_experiment;

#[derive(Parser, Debug)]
#[command(
    name = "diffrep",
    version,
    about = "Diffusion-feature pretraining, probing and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core). Never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override as a dotted path, e.g. `probe.t=90`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoising U-Net.
    TrainDiffusion(ConfigArg),
    /// Generate images with the reverse process.
    Sample(ConfigArg),
    /// Write tapped features of a dataset to a feature store.
    Extract(ConfigArg),
    /// Train a classification head on one feature tap.
    Probe(ConfigArg),
    /// Train a fusion transformer over several timesteps and blocks.
    Difformer(ConfigArg),
    /// Train a feedback network with an attention head.
    Diffeed(ConfigArg),
    /// Representation similarity across blocks or timesteps.
    Cka(ConfigArg),
    /// Nearest-neighbour classification of features.
    Knn(ConfigArg),
    /// Probe every (timestep, block, pool) cell.
    Grid(ConfigArg),
}

impl Command {
    fn split(&self) -> (Task, &Path) {
        match self {
            Command::TrainDiffusion(c) => (Task::TrainDiffusion, &c.config),
            Command::Sample(c) => (Task::Sample, &c.config),
            Command::Extract(c) => (Task::Extract, &c.config),
            Command::Probe(c) => (Task::Probe, &c.config),
            Command::Difformer(c) => (Task::Difformer, &c.config),
            Command::Diffeed(c) => (Task::Diffeed, &c.config),
            Command::Cka(c) => (Task::Cka, &c.config),
            Command::Knn(c) => (Task::Knn, &c.config),
            Command::Grid(c) => (Task::Grid, &c.config),
        }
    }
}

fn one_line(message: impl std::fmt::Display) -> String {
    message
        .to_string()
        .lines()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, path) = cli.command.split();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!(
                "error: cannot read config {}: {}",
                path.display(),
                one_line(e)
            );
            return ExitCode::from(2);
        }
    };
    let mut overrides = vec![format!("task=\"{}\"", task.name())];
    overrides.extend(cli.global.set.iter().cloned());
    if let Some(seed) = cli.global.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = match ExperimentConfig::from_toml(&text, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {}", path.display(), one_line(e));
            return ExitCode::from(2);
        }
    };
    if let Some(w) = cli.global.workers {
        config.workers = Some(w);
    }
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(task.name()));
    match run_experiment(&config, &out) {
        Ok(run) => {
            println!("{}", run.dir.join("report.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", one_line(e));
            ExitCode::from(1)
        }
    }
}

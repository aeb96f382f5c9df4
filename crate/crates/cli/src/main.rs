//! `marlnet` experiment runner.
//!
//! Every subcommand writes its resolved arguments to `<out>/config.json`.
//! With `--config FILE`, keys of the JSON object in `FILE` override the
//! corresponding flags. Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "marlnet",
    version,
    about = "Packet routing with learned graph observations"
)]
struct Cli {
    /// JSON file whose keys override the subcommand flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random graph suite and its statistics.
    GenGraphs(commands::GenGraphs),
    /// Shortest-path heuristic throughput per graph in both modes.
    BaselineSp(commands::BaselineSp),
    /// Build a shortest-path regression dataset.
    BuildDataset(commands::BuildDataset),
    /// Train the shortest-path regressor.
    TrainSl(commands::TrainSl),
    /// Evaluate a regressor at several message-passing steps.
    EvalSl(commands::EvalSl),
    /// Train a routing policy.
    TrainRl(commands::TrainRl),
    /// Evaluate routing policies on a graph suite.
    EvalRl(commands::EvalRl),
    /// Delay-change adaptation experiment.
    Adapt(commands::Adapt),
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

pub fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Applies the overrides in `config` to `args`.
fn resolve<A: Serialize + DeserializeOwned>(args: A, config: Option<&Path>) -> Result<A, Failure> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let overrides: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(overrides) = overrides else {
        return usage(format!("{}: expected a JSON object", path.display()));
    };
    let mut value = serde_json::to_value(args).map_err(anyhow::Error::from)?;
    let fields = value
        .as_object_mut()
        .expect("argument structs serialize to objects");
    for (k, v) in overrides {
        if !fields.contains_key(&k) {
            return usage(format!("{}: unknown key `{k}`", path.display()));
        }
        fields.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenGraphs(a) => commands::gen_graphs(resolve(a, cfg)?),
        Command::BaselineSp(a) => commands::baseline_sp(resolve(a, cfg)?),
        Command::BuildDataset(a) => commands::build_dataset(resolve(a, cfg)?),
        Command::TrainSl(a) => commands::train_sl(resolve(a, cfg)?),
        Command::EvalSl(a) => commands::eval_sl(resolve(a, cfg)?),
        Command::TrainRl(a) => commands::train_rl(resolve(a, cfg)?),
        Command::EvalRl(a) => commands::eval_rl(resolve(a, cfg)?),
        Command::Adapt(a) => commands::adapt(resolve(a, cfg)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

//! `atagnn`: ingest interaction logs, train and evaluate the link
//! predictor, and replay cache policies.
//!
//! Configuration comes from built-in defaults, then `--config FILE` (flat
//! TOML), then `--set key=value`, then the named flags; later sources win.
//! Every run writes the resolved configuration to
//! `<output_dir>/resolved-config.toml`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{list_value, parse_override, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "atagnn", version, about = "Temporal graph link prediction for edge caching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set step=60`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    set: Vec<(String, toml::Value)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// CSV path or `synthetic`.
    #[arg(long, global = true)]
    trace: Option<String>,
    /// latest, mean, attention or aoi-attention.
    #[arg(long, global = true)]
    aggregator: Option<String>,
    #[arg(long, global = true)]
    neighbors: Option<i64>,
    #[arg(long, global = true)]
    epochs: Option<i64>,
    #[arg(long, global = true)]
    batch_size: Option<i64>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Comma-separated subset of lru,lfu,model.
    #[arg(long, global = true)]
    policies: Option<String>,
    /// Comma-separated cache sizes.
    #[arg(long = "cache-size", global = true)]
    cache_size: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a CSV interaction log and print its summary.
    Ingest { path: PathBuf },
    /// Train a model and write checkpoint, memory snapshot, metrics and loss curve.
    Train,
    /// Score the test split with a saved checkpoint and memory snapshot.
    Evaluate,
    /// Replay cache policies over the test split.
    Simulate,
    /// Write a synthetic request trace.
    SynthTrace,
}

impl Cli {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        let mut out = self.set.clone();
        let int = |v: i64| toml::Value::Integer(v);
        if let Some(v) = self.seed {
            let v = i64::try_from(v).map_err(|_| CliError::Usage(format!("seed {v} is too large")))?;
            out.push(("seed".into(), int(v)));
        }
        if let Some(v) = &self.output_dir {
            out.push(("output_dir".into(), v.display().to_string().into()));
        }
        if let Some(v) = &self.trace {
            out.push(("trace".into(), v.clone().into()));
        }
        if let Command::Ingest { path } = &self.command {
            out.push(("trace".into(), path.display().to_string().into()));
        }
        if let Some(v) = &self.aggregator {
            out.push(("aggregator".into(), v.clone().into()));
        }
        for (key, v) in [("neighbors", self.neighbors), ("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if let Some(v) = v {
                out.push((key.into(), int(v)));
            }
        }
        if let Some(v) = self.learning_rate {
            out.push(("learning_rate".into(), v.into()));
        }
        if let Some(v) = &self.policies {
            out.push(("policies".into(), list_value(v)));
        }
        if let Some(v) = &self.cache_size {
            out.push(("cache_sizes".into(), list_value(v)));
        }
        if let Some(v) = &self.checkpoint {
            out.push(("checkpoint".into(), v.clone().into()));
        }
        Ok(out)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.overrides()?)?;
    match cli.command {
        Command::Ingest { .. } => commands::ingest(&config),
        Command::Train => commands::train_cmd(&config),
        Command::Evaluate => commands::evaluate_cmd(&config),
        Command::Simulate => commands::simulate(&config),
        Command::SynthTrace => commands::synth_trace(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::Path;

use atagnn::cache::{self, LfuCache, LruCache, SimulationResult};
use atagnn::checkpoint;
use atagnn::error::{CheckpointError, EventError};
use atagnn::events::{chronological_split, ingest_csv, Trace};
use atagnn::model::{Model, ModelConfig, ModelState, StateSnapshot};
use atagnn::synth::generate_synthetic_trace;
use atagnn::train::{evaluate, train};
use serde::Serialize;

use crate::config::{RunConfig, SYNTHETIC};
use crate::error::CliError;

/// Writes through a temporary sibling so readers never see partial files.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn prepare_output(config: &RunConfig) -> Result<(), CliError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    write_atomic(&dir.join("resolved-config.toml"), config.to_toml().as_bytes())
}

fn event_error(e: EventError) -> CliError {
    match e {
        EventError::Io { .. } | EventError::BadFractions(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn load_trace(config: &RunConfig) -> Result<Trace, CliError> {
    match config.trace.as_str() {
        "" => Err(CliError::Usage("no trace given; set `trace` to a CSV path or `synthetic`".into())),
        SYNTHETIC => generate_synthetic_trace(&config.synth()).map_err(event_error),
        path => Ok(ingest_csv(Path::new(path), config.schema()?).map_err(event_error)?.0),
    }
}

fn load_model(config: &RunConfig) -> Result<Model, CliError> {
    let path = config.checkpoint_path();
    let (params, metadata) = checkpoint::load(&path).map_err(|e| match e {
        CheckpointError::Io { .. } => CliError::Usage(format!("checkpoint missing: {e}")),
        other => CliError::Runtime(other.to_string()),
    })?;
    let model_config: ModelConfig = serde_json::from_value(metadata)
        .map_err(|e| CliError::Runtime(format!("checkpoint {} lacks a model configuration: {e}", path.display())))?;
    Model::from_parts(model_config, params).map_err(CliError::runtime)
}

fn load_state(config: &RunConfig, model: &Model, trace: &Trace) -> Result<ModelState, CliError> {
    let path = config.memory_path();
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("memory snapshot missing: {}: {e}", path.display())))?;
    let snapshot: StateSnapshot = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("malformed memory snapshot {}: {e}", path.display())))?;
    ModelState::from_snapshot(snapshot, trace, &model.config).map_err(CliError::runtime)
}

pub fn ingest(config: &RunConfig) -> Result<(), CliError> {
    let path = Path::new(&config.trace);
    let (_, summary) = ingest_csv(path, config.schema()?).map_err(event_error)?;
    prepare_output(config)?;
    write_json(&config.output_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?);
    Ok(())
}

pub fn train_cmd(config: &RunConfig) -> Result<(), CliError> {
    let trace = load_trace(config)?;
    let outcome = train(&config.train, &trace).map_err(CliError::runtime)?;
    prepare_output(config)?;
    let text = checkpoint::to_json(&outcome.model.params, &outcome.model.config).map_err(CliError::runtime)?;
    write_atomic(&config.checkpoint_path(), text.as_bytes())?;
    write_json(&config.memory_path(), &outcome.state.snapshot())?;
    write_json(&config.output_dir.join("metrics.json"), &outcome.report)?;
    let mut csv = Vec::new();
    outcome.report.write_loss_csv(&mut csv).map_err(CliError::runtime)?;
    write_atomic(&config.output_dir.join("loss.csv"), &csv)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report.test).map_err(CliError::runtime)?);
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    model: String,
    test_events: usize,
    test: atagnn::train::PhaseMetrics,
}

pub fn evaluate_cmd(config: &RunConfig) -> Result<(), CliError> {
    let trace = load_trace(config)?;
    let model = load_model(config)?;
    let mut state = load_state(config, &model, &trace)?;
    let split = chronological_split(&trace, config.train.fractions()).map_err(event_error)?;
    let test = evaluate(&model, &mut state, &trace, split.test(), &split, config.train.batch_size, config.train.seed)
        .map_err(CliError::runtime)?;
    let report = Evaluation {
        model: model.config.aggregator.kind.label().to_string(),
        test_events: split.test().len(),
        test,
    };
    prepare_output(config)?;
    write_json(&config.output_dir.join("evaluation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(CliError::runtime)?);
    Ok(())
}

pub fn simulate(config: &RunConfig) -> Result<(), CliError> {
    let trace = load_trace(config)?;
    let split = chronological_split(&trace, config.train.fractions()).map_err(event_error)?;
    let test = split.test();
    let history = &trace.events[..test.start];
    let segment = &trace.events[test.clone()];
    let mut results: Vec<SimulationResult> = Vec::new();
    for policy in &config.policies {
        match policy.as_str() {
            "lru" => results.extend(
                config
                    .cache_sizes
                    .iter()
                    .map(|&c| cache::run_online_warm(&mut LruCache::new(c), "lru", history, segment)),
            ),
            "lfu" => results.extend(
                config
                    .cache_sizes
                    .iter()
                    .map(|&c| cache::run_online_warm(&mut LfuCache::new(c), "lfu", history, segment)),
            ),
            "model" => {
                let model = load_model(config)?;
                let mut state = load_state(config, &model, &trace)?;
                let out = cache::run_model_policy(
                    &model,
                    &mut state,
                    &trace.events,
                    test.clone(),
                    trace.num_users,
                    trace.num_items,
                    &config.cache_sizes,
                    &config.window,
                )
                .map_err(CliError::runtime)?;
                results.extend(out);
            }
            other => return Err(CliError::Usage(format!("unknown policy `{other}`"))),
        }
    }
    prepare_output(config)?;
    let mut csv = Vec::new();
    cache::write_hit_rate_csv(&results, &mut csv).map_err(CliError::runtime)?;
    write_atomic(&config.output_dir.join("hit_rates.csv"), &csv)?;
    let summary = cache::summarize(&results);
    write_json(&config.output_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?);
    Ok(())
}

pub fn synth_trace(config: &RunConfig) -> Result<(), CliError> {
    let trace = generate_synthetic_trace(&config.synth()).map_err(event_error)?;
    prepare_output(config)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).map_err(CliError::runtime)?;
    write_atomic(&config.output_dir.join("trace.csv"), &csv)?;
    let summary = trace.summary(0);
    write_json(&config.output_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?);
    Ok(())
}

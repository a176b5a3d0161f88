//! Chronological training and evaluation.
//!
//! Every epoch replays the training range from an empty state in batches:
//! sample one uniform negative item per event, score, take an Adam step on
//! the BCE loss, then commit memories and record the batch. The validation
//! range is replayed right after with the same state, without gradient
//! steps, and the epoch with the best validation average precision on old
//! nodes is kept.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorKind, HeadActivation, MaskOrientation};
use crate::error::TrainError;
use crate::events::{chronological_split, sample_negatives, Split, Trace};
use crate::metrics::{auc, average_precision};
use crate::model::{Model, ModelConfig, ModelState};
use crate::params::{AdamConfig, AdamState};

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Message slots per node and GAT fan-in.
    pub neighbors: usize,
    /// Attention heads of the message aggregator.
    pub heads: usize,
    pub aggregator: AggregatorKind,
    pub orientation: MaskOrientation,
    pub head_activation: HeadActivation,
    pub memory_dim: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub age_scale: f64,
    pub initial_threshold: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            learning_rate: 1e-4,
            epochs: 10,
            patience: 5,
            seed: 0,
            neighbors: 10,
            heads: 3,
            aggregator: AggregatorKind::AoiAttention,
            orientation: MaskOrientation::StaleDrops,
            head_activation: HeadActivation::Identity,
            memory_dim: 32,
            time_dim: 16,
            embed_dim: 32,
            head_dim: 16,
            gat_heads: 2,
            gat_layers: 1,
            age_scale: 3600.0,
            initial_threshold: 24.0,
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(self.age_scale > 0.0) {
            return Err(TrainError::Config("age scale must be positive".into()));
        }
        Ok(())
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train_fraction, self.val_fraction, self.test_fraction)
    }

    pub fn model_config(&self, trace: &Trace) -> ModelConfig {
        let mut cfg = ModelConfig {
            node_feature_dim: trace.node_feature_dim(),
            edge_dim: trace.edge_dim,
            memory_dim: self.memory_dim,
            time_dim: self.time_dim,
            embed_dim: self.embed_dim,
            neighbors: self.neighbors,
            time_span: trace_span(trace),
            ..ModelConfig::default()
        };
        let a = &mut cfg.aggregator;
        a.kind = self.aggregator;
        a.slots = self.neighbors;
        a.heads = self.heads;
        a.head_dim = self.head_dim;
        a.orientation = self.orientation;
        a.head_activation = self.head_activation;
        a.age_scale = self.age_scale;
        a.initial_threshold = self.initial_threshold;
        cfg.embed.heads = self.gat_heads;
        cfg.embed.head_dim = self.head_dim;
        cfg.embed.layers = self.gat_layers;
        cfg
    }
}

fn trace_span(trace: &Trace) -> f64 {
    match (trace.events.first(), trace.events.last()) {
        (Some(a), Some(b)) => (b.timestamp - a.timestamp).max(1.0),
        _ => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub ap: f64,
    /// Positive events in the subset.
    pub events: usize,
}

/// Metrics for both tasks; a task with no events has no metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub transductive: Option<Metrics>,
    pub inductive: Option<Metrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEvent {
    pub positive: f64,
    pub negative: f64,
    /// At least one endpoint never appeared in training.
    pub inductive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation: PhaseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub aggregator: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub validation: PhaseMetrics,
    pub test: PhaseMetrics,
    pub clamped_predictions: usize,
}

impl EvalReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn write_loss_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "val_auc", "val_ap"])?;
        for e in &self.epochs {
            let (auc, ap) = e
                .validation
                .transductive
                .map_or((String::new(), String::new()), |m| (m.auc.to_string(), m.ap.to_string()));
            w.write_record([e.epoch.to_string(), e.loss.to_string(), auc, ap])?;
        }
        w.flush()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// State at the validation/test boundary for the selected epoch.
    pub state: ModelState,
    pub split: Split,
    pub report: EvalReport,
}

/// Task metrics over scored events. Empty subsets produce `None` and a warning.
pub fn task_metrics(scored: &[ScoredEvent]) -> PhaseMetrics {
    let subset = |inductive: bool| -> Option<Metrics> {
        let picked: Vec<&ScoredEvent> = scored.iter().filter(|s| s.inductive == inductive).collect();
        let name = if inductive { "inductive" } else { "transductive" };
        if picked.is_empty() {
            log::warn!("{name} subset is empty; no metrics reported");
            return None;
        }
        let mut scores = Vec::with_capacity(2 * picked.len());
        let mut labels = Vec::with_capacity(2 * picked.len());
        for s in &picked {
            scores.push(s.positive);
            labels.push(true);
            scores.push(s.negative);
            labels.push(false);
        }
        Some(Metrics {
            auc: auc(&scores, &labels).ok()?,
            ap: average_precision(&scores, &labels).ok()?,
            events: picked.len(),
        })
    };
    PhaseMetrics {
        transductive: subset(false),
        inductive: subset(true),
    }
}

fn negative_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scores `range` of `trace` batch by batch, updating `state` with the true
/// events after each batch.
pub fn score_range(
    model: &Model,
    state: &mut ModelState,
    trace: &Trace,
    range: std::ops::Range<usize>,
    split: &Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ScoredEvent>> {
    let mut rng = negative_rng(seed, 1);
    let mut out = Vec::with_capacity(range.len());
    for batch in trace.events[range].chunks(batch_size.max(1)) {
        let pairs: Vec<(usize, usize)> = batch.iter().map(|e| (e.user, e.item)).collect();
        let negatives = sample_negatives(&pairs, trace.num_items, &mut rng)?;
        let pass = model.batch_pass(state, batch, &negatives)?;
        for ((e, p), n) in batch.iter().zip(pass.positive_scores()).zip(pass.negative_scores()) {
            out.push(ScoredEvent {
                positive: p,
                negative: n,
                inductive: split.is_new(trace.user_node(e.user)) || split.is_new(trace.item_node(e.item)),
            });
        }
        pass.finish(state, batch);
    }
    Ok(out)
}

/// Evaluates `range` starting from `state`, which keeps absorbing the
/// ground-truth events.
pub fn evaluate(
    model: &Model,
    state: &mut ModelState,
    trace: &Trace,
    range: std::ops::Range<usize>,
    split: &Split,
    batch_size: usize,
    seed: u64,
) -> Result<PhaseMetrics> {
    let scored = score_range(model, state, trace, range, split, batch_size, seed)?;
    Ok(task_metrics(&scored))
}

/// One pass over the training range. Returns the mean batch loss.
fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    state: &mut ModelState,
    trace: &Trace,
    split: &Split,
    config: &TrainConfig,
    epoch: usize,
    batch_offset: &mut usize,
    clamped: &mut usize,
) -> Result<f64> {
    let mut rng = negative_rng(config.seed, 1000 + epoch as u64);
    let mut total = 0.0;
    let mut batches = 0usize;
    for batch in trace.events[split.train()].chunks(config.batch_size) {
        let pairs: Vec<(usize, usize)> = batch.iter().map(|e| (e.user, e.item)).collect();
        let negatives = sample_negatives(&pairs, trace.num_items, &mut rng)?;
        let pass = model.batch_pass(state, batch, &negatives)?;
        let loss = pass.loss();
        if !loss.is_finite() {
            return Err(TrainError::Diverged { batch: *batch_offset });
        }
        *clamped += pass.graph.clamped_predictions();
        let mut grads = pass.gradients(&model.params)?;
        adam.step(&mut model.params, &mut grads)?;
        pass.finish(state, batch);
        total += loss;
        batches += 1;
        *batch_offset += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Selection score of a validation phase: old-node AP, falling back to
/// new-node AP when no old-node events exist.
fn selection_score(m: &PhaseMetrics) -> f64 {
    m.transductive.or(m.inductive).map_or(f64::NEG_INFINITY, |x| x.ap)
}

pub fn train(config: &TrainConfig, trace: &Trace) -> Result<TrainOutcome> {
    config.validate()?;
    let split = chronological_split(trace, config.fractions())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model_config(trace), &mut init_rng)?;
    let adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, &model.params);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParameterSet, ModelState, PhaseMetrics)> = None;
    let mut since_best = 0;
    let mut batch_offset = 0;
    let mut clamped = 0;
    for epoch in 0..config.epochs {
        let mut state = model.new_state(trace);
        let loss = train_epoch(
            &mut model,
            &mut adam,
            &mut state,
            trace,
            &split,
            config,
            epoch,
            &mut batch_offset,
            &mut clamped,
        )?;
        let validation = evaluate(&model, &mut state, trace, split.val(), &split, config.batch_size, config.seed)?;
        log::info!("epoch {epoch}: loss {loss:.5}, validation {validation:?}");
        epochs.push(EpochRecord {
            epoch,
            loss,
            validation,
        });
        let score = selection_score(&validation);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.params.clone(), state, validation));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, validation, mut state) = match best {
        Some((_, e, params, state, validation)) => {
            model.params = params;
            (e, validation, state)
        }
        None => {
            // No epochs: evaluate the initial parameters.
            let mut state = model.new_state(trace);
            model.observe(&mut state, &trace.events[split.train()])?;
            let v = evaluate(&model, &mut state, trace, split.val(), &split, config.batch_size, config.seed)?;
            (0, v, state)
        }
    };
    let boundary = state.clone();
    let test = evaluate(&model, &mut state, trace, split.test(), &split, config.batch_size, config.seed)?;
    let report = EvalReport {
        model: config.aggregator.label().to_string(),
        aggregator: config.aggregator.name().to_string(),
        epochs_run: epochs.len(),
        best_epoch,
        epochs,
        validation,
        test,
        clamped_predictions: clamped,
    };
    Ok(TrainOutcome {
        model,
        state: boundary,
        split,
        report,
    })
}

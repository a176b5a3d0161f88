//! End-to-end training and caching runs on synthetic traces.

use atagnn::cache::{self, CandidateScope, LfuCache, LruCache, PredictionWindowConfig};
use atagnn::events::Trace;
use atagnn::synth::{generate_synthetic_trace, SynthConfig};
use atagnn::train::{train, TrainConfig, TrainOutcome};

pub const CAPACITIES: [usize; 4] = [5, 10, 15, 20];

/// Cluster-separable trace: users only ever request items of their cluster,
/// and item features reveal the cluster.
pub fn learnability_trace() -> Trace {
    generate_synthetic_trace(&SynthConfig {
        hours: 12,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// The full model with a step size that fits three epochs on a small trace.
pub fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 20,
        epochs: 3,
        seed,
        ..TrainConfig::default()
    }
}

/// Best validation AUC within three epochs.
pub fn learnability() -> f64 {
    let outcome = train(&fast_config(0), &learnability_trace()).unwrap();
    outcome
        .report
        .epochs
        .iter()
        .filter_map(|e| e.validation.transductive.map(|m| m.auc))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Pure popularity trace whose ranking is reshuffled every four hours.
pub fn drifting_trace(seed: u64) -> Trace {
    generate_synthetic_trace(
        &SynthConfig {
            seed,
            clusters: 1,
            hours: 36,
            ..SynthConfig::default()
        }
        .with_drift_every(4),
    )
    .unwrap()
}

pub fn window_config() -> PredictionWindowConfig {
    PredictionWindowConfig {
        step: 120.0,
        request_threshold: 0.5,
        memory_update_hours: 1,
        scope: CandidateScope::Recent1h,
        fake_updates: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachingRun {
    /// Average hit rate per entry of [`CAPACITIES`].
    pub model: Vec<f64>,
    pub lru: Vec<f64>,
    pub lfu: Vec<f64>,
}

pub fn caching_outcome(seed: u64) -> (Trace, TrainOutcome) {
    let trace = drifting_trace(seed);
    let config = TrainConfig {
        train_fraction: 0.5,
        val_fraction: 0.1,
        test_fraction: 0.4,
        ..fast_config(seed)
    };
    let outcome = train(&config, &trace).unwrap();
    (trace, outcome)
}

/// Model, LRU and LFU over the test split; the online policies are warmed
/// up on everything before it.
pub fn caching_run(seed: u64) -> CachingRun {
    let (trace, outcome) = caching_outcome(seed);
    let test = outcome.split.test();
    let mut state = outcome.state.clone();
    let model = cache::run_model_policy(
        &outcome.model,
        &mut state,
        &trace.events,
        test.clone(),
        trace.num_users,
        trace.num_items,
        &CAPACITIES,
        &window_config(),
    )
    .unwrap();
    let history = &trace.events[..test.start];
    let segment = &trace.events[test];
    CachingRun {
        model: model.iter().map(|r| r.average()).collect(),
        lru: CAPACITIES
            .iter()
            .map(|&c| cache::run_online_warm(&mut LruCache::new(c), "lru", history, segment).average())
            .collect(),
        lfu: CAPACITIES
            .iter()
            .map(|&c| cache::run_online_warm(&mut LfuCache::new(c), "lfu", history, segment).average())
            .collect(),
    }
}

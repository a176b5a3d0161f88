//! Synthetic request traces with drifting Zipf popularity.
//!
//! Items are split into clusters and every user belongs to exactly one
//! cluster. Each request first draws an item from a global Zipf law over
//! popularity ranks, then a user from the item's cluster, so users only
//! ever request items of their own cluster. At every drift hour the
//! rank-to-item assignment is reshuffled.
//!
//! Items carry static features (a per-cluster centroid plus noise), which
//! makes the cluster structure recoverable from features alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::EventError;
use crate::events::{InteractionEvent, Trace};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub hours: usize,
    pub events_per_hour: usize,
    pub zipf_exponent: f64,
    pub clusters: usize,
    /// Hours (counted from 0) at whose start popularity is reshuffled.
    pub drift_hours: Vec<usize>,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub edge_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            users: 200,
            items: 100,
            hours: 24,
            events_per_hour: 300,
            zipf_exponent: 1.0,
            clusters: 25,
            drift_hours: Vec::new(),
            feature_dim: 8,
            feature_noise: 0.1,
            edge_dim: 2,
        }
    }
}

impl SynthConfig {
    /// Drift at hours `every`, `2·every`, ... below `self.hours`.
    pub fn with_drift_every(mut self, every: usize) -> Self {
        self.drift_hours = if every == 0 {
            Vec::new()
        } else {
            (every..self.hours).step_by(every).collect()
        };
        self
    }
}

/// Cluster of every item, as assigned by [`generate_synthetic_trace`].
pub fn item_clusters(config: &SynthConfig) -> Vec<usize> {
    let clusters = effective_clusters(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..config.items).collect();
    order.shuffle(&mut rng);
    let mut out = vec![0; config.items];
    for (pos, &item) in order.iter().enumerate() {
        out[item] = pos % clusters;
    }
    out
}

/// Cluster of every user.
pub fn user_clusters(config: &SynthConfig) -> Vec<usize> {
    let clusters = effective_clusters(config);
    (0..config.users).map(|u| u % clusters).collect()
}

fn effective_clusters(config: &SynthConfig) -> usize {
    config.clusters.min(config.users).min(config.items).max(1)
}

/// Rank-to-item table of every hour; entry 0 is the most popular item.
pub fn popularity_rankings(config: &SynthConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let mut ranking: Vec<usize> = (0..config.items).collect();
    ranking.shuffle(&mut rng);
    let mut out = Vec::with_capacity(config.hours);
    for hour in 0..config.hours {
        if config.drift_hours.contains(&hour) {
            ranking.shuffle(&mut rng);
        }
        out.push(ranking.clone());
    }
    out
}

pub fn generate_synthetic_trace(config: &SynthConfig) -> Result<Trace, EventError> {
    if config.items == 0 {
        return Err(EventError::NoItems);
    }
    if config.users == 0 {
        return Err(EventError::Malformed {
            line: 0,
            message: "synthetic trace needs at least one user".into(),
        });
    }
    let clusters = effective_clusters(config);
    let item_cluster = item_clusters(config);
    let user_cluster = user_clusters(config);
    let mut members = vec![Vec::new(); clusters];
    for (u, &c) in user_cluster.iter().enumerate() {
        members[c].push(u);
    }

    // Separate streams so changing one knob does not reshuffle the others.
    let mut feature_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut event_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..config.feature_dim).map(|_| normal.sample(&mut feature_rng)).collect())
        .collect();
    let item_features: Vec<Vec<f64>> = item_cluster
        .iter()
        .map(|&c| {
            centroids[c]
                .iter()
                .map(|&x| x + config.feature_noise * normal.sample(&mut feature_rng))
                .collect()
        })
        .collect();
    let user_features = vec![vec![0.0; config.feature_dim]; config.users];

    let zipf = Zipf::new(config.items as f64, config.zipf_exponent).map_err(|e| EventError::Malformed {
        line: 0,
        message: format!("invalid Zipf parameters: {e}"),
    })?;
    let rankings = popularity_rankings(config);

    let mut events = Vec::with_capacity(config.hours * config.events_per_hour);
    for (hour, ranking) in rankings.iter().enumerate() {
        let start = events.len();
        for _ in 0..config.events_per_hour {
            let rank = zipf.sample(&mut event_rng) as usize;
            let item = ranking[rank.clamp(1, config.items) - 1];
            let pool = &members[item_cluster[item]];
            let user = pool[event_rng.random_range(0..pool.len())];
            let timestamp = hour as f64 * SECONDS_PER_HOUR + event_rng.random_range(0.0..SECONDS_PER_HOUR);
            let edge_features = (0..config.edge_dim).map(|_| event_rng.random_range(-1.0..1.0)).collect();
            events.push(InteractionEvent {
                user,
                item,
                timestamp,
                edge_features,
            });
        }
        events[start..].sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }

    Ok(Trace {
        events,
        num_users: config.users,
        num_items: config.items,
        edge_dim: config.edge_dim,
        user_features,
        item_features,
    })
}

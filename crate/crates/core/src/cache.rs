//! Edge cache simulation.
//!
//! Three policies are simulated over a request trace:
//!
//! * **LRU** evicts the item whose last request is the oldest.
//! * **LFU** keeps global request counts since the start of the run; a missed
//!   item replaces the least requested cached item once its own count is
//!   strictly larger.
//! * **Model-based** refills the whole cache at the top of every hour with
//!   the `C` items that collect the most predicted requests. A prediction is
//!   made every `δ_p` seconds across the hour: each candidate pair whose
//!   probability exceeds `P_I` counts as one request for its item.
//!
//! Hit rates are computed per hour and averaged over hours that carry at
//! least one request.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embed::score_all_pairs;
use crate::error::CacheError;
use crate::events::InteractionEvent;
use crate::model::{Model, ModelState};
use crate::synth::SECONDS_PER_HOUR;

type Result<T> = std::result::Result<T, CacheError>;

/// Which users and items are scored when predicting an hour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateScope {
    AllItems,
    #[default]
    #[serde(rename = "recent-1h")]
    Recent1h,
    #[serde(rename = "recent-2h")]
    Recent2h,
}

impl CandidateScope {
    pub fn name(self) -> &'static str {
        match self {
            CandidateScope::AllItems => "all-items",
            CandidateScope::Recent1h => "recent-1h",
            CandidateScope::Recent2h => "recent-2h",
        }
    }

    fn lookback_hours(self) -> Option<f64> {
        match self {
            CandidateScope::AllItems => None,
            CandidateScope::Recent1h => Some(1.0),
            CandidateScope::Recent2h => Some(2.0),
        }
    }
}

impl std::str::FromStr for CandidateScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [CandidateScope::AllItems, CandidateScope::Recent1h, CandidateScope::Recent2h]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown candidate scope `{s}`; expected all-items, recent-1h or recent-2h"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionWindowConfig {
    /// Seconds between two predictions inside an hour (`δ_p`).
    pub step: f64,
    /// Probability above which a pair counts as a request (`P_I`).
    pub request_threshold: f64,
    /// Hours between memory refreshes with real interactions (`T_u`).
    pub memory_update_hours: usize,
    pub scope: CandidateScope,
    /// Feed predicted requests back into a scratch memory within the hour.
    pub fake_updates: bool,
}

impl Default for PredictionWindowConfig {
    fn default() -> Self {
        Self {
            step: 6.0,
            request_threshold: 0.5,
            memory_update_hours: 1,
            scope: CandidateScope::Recent1h,
            fake_updates: false,
        }
    }
}

impl PredictionWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(CacheError::Config(format!("prediction step must be positive, got {}", self.step)));
        }
        if self.memory_update_hours == 0 || (self.memory_update_hours as f64) * SECONDS_PER_HOUR < self.step {
            return Err(CacheError::Config("memory update period must cover at least one prediction step".into()));
        }
        if !(self.request_threshold > 0.0 && self.request_threshold <= 1.0) {
            return Err(CacheError::Config(format!(
                "request threshold must lie in (0, 1], got {}",
                self.request_threshold
            )));
        }
        Ok(())
    }
}

/// Scores user × item pairs at a point in time.
pub trait PairScorer {
    /// Row-major `[users, items]` probabilities at time `t`.
    fn score_pairs(&mut self, users: &[usize], items: &[usize], t: f64) -> Result<Vec<f64>>;

    /// Receives the requests predicted at `t` when within-hour updates are on.
    fn absorb(&mut self, _requests: &[(usize, usize)], _t: f64) -> Result<()> {
        Ok(())
    }

    /// Drops whatever [`PairScorer::absorb`] accumulated.
    fn reset(&mut self) {}
}

/// Predicted request count per candidate item over `[start, start + 1h)`.
pub fn predict_requests<S: PairScorer + ?Sized>(
    scorer: &mut S,
    users: &[usize],
    items: &[usize],
    start: f64,
    config: &PredictionWindowConfig,
) -> Result<Vec<u64>> {
    if users.is_empty() || items.is_empty() {
        return Err(CacheError::EmptyCandidates);
    }
    config.validate()?;
    let mut counts = vec![0u64; items.len()];
    let steps = (SECONDS_PER_HOUR / config.step).ceil() as usize;
    let mut outcome = Ok(());
    for k in 0..steps {
        let t = start + k as f64 * config.step;
        let probs = match scorer.score_pairs(users, items, t) {
            Ok(p) => p,
            Err(e) => {
                outcome = Err(e);
                break;
            }
        };
        let mut fake = Vec::new();
        for (u, row) in probs.chunks(items.len()).enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if p > config.request_threshold {
                    counts[j] += 1;
                    if config.fake_updates {
                        fake.push((users[u], items[j]));
                    }
                }
            }
        }
        if config.fake_updates && !fake.is_empty() {
            if let Err(e) = scorer.absorb(&fake, t) {
                outcome = Err(e);
                break;
            }
        }
    }
    scorer.reset();
    outcome.map(|_| counts)
}

/// The `capacity` items with the largest counts, ties going to the smaller id.
pub fn select_top_c(counts: &[(usize, u64)], capacity: usize) -> BTreeSet<usize> {
    let mut ranked: Vec<(usize, u64)> = counts.to_vec();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(capacity).map(|(item, _)| item).collect()
}

/// An online replacement policy.
pub trait ReplacementPolicy {
    /// Serves one request and returns whether it hit.
    fn request(&mut self, item: usize) -> bool;
    fn cached(&self) -> BTreeSet<usize>;
    fn capacity(&self) -> usize;
}

#[derive(Clone, Debug, Default)]
pub struct LruCache {
    capacity: usize,
    clock: u64,
    stamp: HashMap<usize, u64>,
    order: BTreeMap<u64, usize>,
}

impl LruCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }
}

impl ReplacementPolicy for LruCache {
    fn request(&mut self, item: usize) -> bool {
        self.clock += 1;
        if let Some(old) = self.stamp.insert(item, self.clock) {
            self.order.remove(&old);
            self.order.insert(self.clock, item);
            return true;
        }
        if self.capacity == 0 {
            self.stamp.remove(&item);
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some((_, victim)) = self.order.pop_first() {
                self.stamp.remove(&victim);
            }
        }
        self.order.insert(self.clock, item);
        false
    }

    fn cached(&self) -> BTreeSet<usize> {
        self.order.values().copied().collect()
    }

    fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Clone, Debug, Default)]
pub struct LfuCache {
    capacity: usize,
    counts: HashMap<usize, u64>,
    cached: BTreeSet<usize>,
}

impl LfuCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn count(&self, item: usize) -> u64 {
        self.counts.get(&item).copied().unwrap_or(0)
    }
}

impl ReplacementPolicy for LfuCache {
    fn request(&mut self, item: usize) -> bool {
        let count = {
            let c = self.counts.entry(item).or_insert(0);
            *c += 1;
            *c
        };
        if self.cached.contains(&item) {
            return true;
        }
        if self.capacity == 0 {
            return false;
        }
        if self.cached.len() < self.capacity {
            self.cached.insert(item);
            return false;
        }
        // Least requested cached item, the smaller id on ties.
        let victim = self
            .cached
            .iter()
            .map(|&i| (self.count(i), i))
            .min()
            .expect("cache is full and non-empty");
        if count > victim.0 {
            self.cached.remove(&victim.1);
            self.cached.insert(item);
        }
        false
    }

    fn cached(&self) -> BTreeSet<usize> {
        self.cached.clone()
    }

    fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourStat {
    pub hour: usize,
    pub requests: u64,
    pub hits: u64,
}

impl HourStat {
    /// Hits over requests; `None` for an hour without requests.
    pub fn hit_rate(&self) -> Option<f64> {
        (self.requests > 0).then(|| self.hits as f64 / self.requests as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub policy: String,
    pub cache_size: usize,
    pub hours: Vec<HourStat>,
}

impl SimulationResult {
    fn new(policy: &str, cache_size: usize, hours: usize) -> Self {
        Self {
            policy: policy.to_string(),
            cache_size,
            hours: (0..hours).map(|hour| HourStat { hour, requests: 0, hits: 0 }).collect(),
        }
    }

    /// Mean of the per-hour hit rates over hours with requests.
    pub fn average(&self) -> f64 {
        let rates: Vec<f64> = self.hours.iter().filter_map(HourStat::hit_rate).collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }

    pub fn total_hits(&self) -> u64 {
        self.hours.iter().map(|h| h.hits).sum()
    }
}

/// Hour grid of a simulation: hour `h` covers `[origin + h·3600, origin + (h+1)·3600)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HourGrid {
    pub origin: f64,
    pub hours: usize,
}

impl HourGrid {
    /// Whole hours covering `events`, starting at the first request.
    pub fn covering(events: &[InteractionEvent]) -> Self {
        match (events.first(), events.last()) {
            (Some(a), Some(b)) => {
                let origin = a.timestamp;
                let hours = ((b.timestamp - origin) / SECONDS_PER_HOUR).floor() as usize + 1;
                Self { origin, hours }
            }
            _ => Self { origin: 0.0, hours: 0 },
        }
    }

    pub fn hour_of(&self, t: f64) -> usize {
        (((t - self.origin) / SECONDS_PER_HOUR).floor().max(0.0) as usize).min(self.hours.saturating_sub(1))
    }

    pub fn start(&self, hour: usize) -> f64 {
        self.origin + hour as f64 * SECONDS_PER_HOUR
    }
}

/// Replays `events` through an online policy.
pub fn run_online<P: ReplacementPolicy>(policy: &mut P, name: &str, events: &[InteractionEvent]) -> SimulationResult {
    let grid = HourGrid::covering(events);
    let mut result = SimulationResult::new(name, policy.capacity(), grid.hours);
    for e in events {
        let stat = &mut result.hours[grid.hour_of(e.timestamp)];
        stat.requests += 1;
        if policy.request(e.item) {
            stat.hits += 1;
        }
    }
    result
}

/// Like [`run_online`], after first serving `warmup` without recording it.
pub fn run_online_warm<P: ReplacementPolicy>(
    policy: &mut P,
    name: &str,
    warmup: &[InteractionEvent],
    events: &[InteractionEvent],
) -> SimulationResult {
    for e in warmup {
        policy.request(e.item);
    }
    run_online(policy, name, events)
}

pub fn run_lru(events: &[InteractionEvent], capacity: usize) -> SimulationResult {
    run_online(&mut LruCache::new(capacity), "lru", events)
}

pub fn run_lfu(events: &[InteractionEvent], capacity: usize) -> SimulationResult {
    run_online(&mut LfuCache::new(capacity), "lfu", events)
}

/// Serves every hour from a fixed cached set.
pub fn run_static_hours(name: &str, events: &[InteractionEvent], caches: &[BTreeSet<usize>], capacity: usize) -> SimulationResult {
    let grid = HourGrid::covering(events);
    let mut result = SimulationResult::new(name, capacity, grid.hours);
    for e in events {
        let h = grid.hour_of(e.timestamp);
        let stat = &mut result.hours[h];
        stat.requests += 1;
        if caches.get(h).is_some_and(|c| c.contains(&e.item)) {
            stat.hits += 1;
        }
    }
    result
}

/// Users and items with a request in `[start - lookback, start)`, or
/// everything when the scope is unbounded.
pub fn candidates(
    history: &[InteractionEvent],
    start: f64,
    scope: CandidateScope,
    num_users: usize,
    num_items: usize,
) -> (Vec<usize>, Vec<usize>) {
    match scope.lookback_hours() {
        None => ((0..num_users).collect(), (0..num_items).collect()),
        Some(h) => {
            let from = start - h * SECONDS_PER_HOUR;
            let lo = history.partition_point(|e| e.timestamp < from);
            let hi = history.partition_point(|e| e.timestamp < start);
            let mut users = BTreeSet::new();
            let mut items = BTreeSet::new();
            for e in &history[lo..hi] {
                users.insert(e.user);
                items.insert(e.item);
            }
            (users.into_iter().collect(), items.into_iter().collect())
        }
    }
}

/// Scores pairs with a trained model over a frozen memory state.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub state: &'a ModelState,
    scratch: Option<ModelState>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, state: &'a ModelState) -> Self {
        Self {
            model,
            state,
            scratch: None,
        }
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score_pairs(&mut self, users: &[usize], items: &[usize], t: f64) -> Result<Vec<f64>> {
        let state = self.scratch.as_ref().unwrap_or(self.state);
        let user_nodes: Vec<usize> = users.iter().map(|&u| state.user_node(u)).collect();
        let item_nodes: Vec<usize> = items.iter().map(|&i| state.item_node(i)).collect();
        let ue = self.model.embed_nodes(state, &user_nodes, t)?;
        let ie = self.model.embed_nodes(state, &item_nodes, t)?;
        Ok(score_all_pairs(&self.model.params, &ue, &ie)?)
    }

    fn absorb(&mut self, requests: &[(usize, usize)], t: f64) -> Result<()> {
        let scratch = self.scratch.get_or_insert_with(|| self.state.clone());
        let events: Vec<InteractionEvent> = requests
            .iter()
            .map(|&(user, item)| InteractionEvent {
                user,
                item,
                timestamp: t,
                edge_features: vec![0.0; self.model.config.edge_dim],
            })
            .collect();
        self.model.observe(scratch, &events)?;
        Ok(())
    }

    fn reset(&mut self) {
        self.scratch = None;
    }
}

/// Model-based caching over `events[range]`. Events before the range are
/// history: they choose the first hour's candidates and are assumed to be
/// already absorbed by `state`. Returns one result per cache size.
pub fn run_model_policy(
    model: &Model,
    state: &mut ModelState,
    events: &[InteractionEvent],
    range: std::ops::Range<usize>,
    num_users: usize,
    num_items: usize,
    capacities: &[usize],
    config: &PredictionWindowConfig,
) -> Result<Vec<SimulationResult>> {
    config.validate()?;
    let segment = &events[range.clone()];
    let grid = HourGrid::covering(segment);
    let mut caches: Vec<Vec<BTreeSet<usize>>> = vec![Vec::with_capacity(grid.hours); capacities.len()];
    let mut absorbed = range.start;
    for hour in 0..grid.hours {
        let start = grid.start(hour);
        let seen = range.start + segment.partition_point(|e| e.timestamp < start);
        if hour % config.memory_update_hours == 0 && seen > absorbed {
            for batch in events[absorbed..seen].chunks(200) {
                model.observe(state, batch)?;
            }
            absorbed = seen;
        }
        let (users, items) = candidates(&events[..seen], start, config.scope, num_users, num_items);
        let counts = if users.is_empty() || items.is_empty() {
            log::warn!("hour {hour}: no candidates, cache left empty");
            Vec::new()
        } else {
            let mut scorer = ModelScorer::new(model, state);
            let c = predict_requests(&mut scorer, &users, &items, start, config)?;
            items.iter().copied().zip(c).collect()
        };
        for (slot, &cap) in caches.iter_mut().zip(capacities) {
            slot.push(select_top_c(&counts, cap));
        }
    }
    Ok(capacities
        .iter()
        .zip(&caches)
        .map(|(&cap, c)| run_static_hours("model", segment, c, cap))
        .collect())
}

/// Writes `hour,policy,cache_size,hit_rate` rows; hours without requests are skipped.
pub fn write_hit_rate_csv<W: Write>(results: &[SimulationResult], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["hour", "policy", "cache_size", "hit_rate"])?;
    for r in results {
        for h in &r.hours {
            if let Some(rate) = h.hit_rate() {
                w.write_record([h.hour.to_string(), r.policy.clone(), r.cache_size.to_string(), rate.to_string()])?;
            }
        }
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub cache_size: usize,
    pub average_hit_rate: f64,
    pub requests: u64,
    pub hits: u64,
}

pub fn summarize(results: &[SimulationResult]) -> Vec<PolicySummary> {
    results
        .iter()
        .map(|r| PolicySummary {
            policy: r.policy.clone(),
            cache_size: r.cache_size,
            average_hit_rate: r.average(),
            requests: r.hours.iter().map(|h| h.requests).sum(),
            hits: r.total_hits(),
        })
        .collect()
}

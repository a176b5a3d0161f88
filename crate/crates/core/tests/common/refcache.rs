//! Brute-force cache simulators used as references.

use std::collections::BTreeSet;

use atagnn::cache::{self, LfuCache, LruCache, ReplacementPolicy};
use atagnn::events::InteractionEvent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// LRU kept as a list ordered from least to most recently used.
pub fn lru_hits(items: &[usize], capacity: usize) -> Vec<bool> {
    let mut list: Vec<usize> = Vec::new();
    items
        .iter()
        .map(|&x| {
            if let Some(pos) = list.iter().position(|&y| y == x) {
                list.remove(pos);
                list.push(x);
                true
            } else {
                if capacity > 0 {
                    if list.len() == capacity {
                        list.remove(0);
                    }
                    list.push(x);
                }
                false
            }
        })
        .collect()
}

/// LFU recounting the whole prefix at every request. A missed item replaces
/// the least requested cached item (smallest id on ties) only when it has
/// now been requested strictly more often.
pub fn lfu_hits(items: &[usize], capacity: usize) -> Vec<bool> {
    let mut cached: Vec<usize> = Vec::new();
    (0..items.len())
        .map(|k| {
            let x = items[k];
            let count = |y: usize| items[..=k].iter().filter(|&&z| z == y).count();
            if cached.contains(&x) {
                return true;
            }
            if capacity == 0 {
                return false;
            }
            if cached.len() < capacity {
                cached.push(x);
                return false;
            }
            let mut victim = cached[0];
            for &c in &cached {
                if (count(c), c) < (count(victim), victim) {
                    victim = c;
                }
            }
            if count(x) > count(victim) {
                cached.retain(|&c| c != victim);
                cached.push(x);
            }
            false
        })
        .collect()
}

/// The `capacity` largest counts, smaller id first on ties.
pub fn top_c(counts: &[(usize, u64)], capacity: usize) -> BTreeSet<usize> {
    let mut chosen = BTreeSet::new();
    let mut left: Vec<(usize, u64)> = counts.to_vec();
    while chosen.len() < capacity && !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (bi, bc) = left[best];
            let (ki, kc) = left[k];
            if kc > bc || (kc == bc && ki < bi) {
                best = k;
            }
        }
        chosen.insert(left.remove(best).0);
    }
    chosen
}

pub fn random_trace(rng: &mut ChaCha8Rng) -> Vec<InteractionEvent> {
    let n = rng.random_range(1..=1000);
    let items = rng.random_range(1..40);
    let span = rng.random_range(1.0..5.0) * 3600.0;
    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..span)).collect();
    times.sort_by(f64::total_cmp);
    times
        .into_iter()
        .map(|t| {
            // Skewed item choice so the policies disagree with each other.
            let a: usize = rng.random_range(0..items);
            let b: usize = rng.random_range(0..items);
            InteractionEvent {
                user: 0,
                item: a.min(b),
                timestamp: t,
                edge_features: Vec::new(),
            }
        })
        .collect()
}

fn sequence<P: ReplacementPolicy>(mut policy: P, items: &[usize]) -> Vec<bool> {
    items.iter().map(|&x| policy.request(x)).collect()
}

/// Per-hour hit and request totals of a hit sequence.
fn per_hour(events: &[InteractionEvent], hits: &[bool]) -> Vec<(u64, u64)> {
    let origin = events[0].timestamp;
    let hours = ((events.last().unwrap().timestamp - origin) / 3600.0).floor() as usize + 1;
    let mut out = vec![(0, 0); hours];
    for (e, &h) in events.iter().zip(hits) {
        let slot = &mut out[((e.timestamp - origin) / 3600.0).floor() as usize];
        slot.0 += 1;
        slot.1 += u64::from(h);
    }
    out
}

fn totals(result: &cache::SimulationResult) -> Vec<(u64, u64)> {
    result.hours.iter().map(|h| (h.requests, h.hits)).collect()
}

/// Compares LRU, LFU and hourly top-C against the references on one trace.
pub fn check_trace(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = random_trace(&mut rng);
    let items: Vec<usize> = events.iter().map(|e| e.item).collect();
    let capacity = rng.random_range(0..12);

    let lru = lru_hits(&items, capacity);
    if sequence(LruCache::new(capacity), &items) != lru {
        return Err(format!("trace {seed}: LRU sequence differs (C={capacity})"));
    }
    if totals(&cache::run_lru(&events, capacity)) != per_hour(&events, &lru) {
        return Err(format!("trace {seed}: LRU hourly totals differ"));
    }

    let lfu = lfu_hits(&items, capacity);
    if sequence(LfuCache::new(capacity), &items) != lfu {
        return Err(format!("trace {seed}: LFU sequence differs (C={capacity})"));
    }
    if totals(&cache::run_lfu(&events, capacity)) != per_hour(&events, &lfu) {
        return Err(format!("trace {seed}: LFU hourly totals differ"));
    }

    // Top-C of each hour's own counts, served statically over that hour.
    let origin = events[0].timestamp;
    let hour_of = |t: f64| ((t - origin) / 3600.0).floor() as usize;
    let hours = hour_of(events.last().unwrap().timestamp) + 1;
    let mut sets = Vec::with_capacity(hours);
    for h in 0..hours {
        let mut counts: Vec<(usize, u64)> = Vec::new();
        for e in events.iter().filter(|e| hour_of(e.timestamp) == h) {
            match counts.iter_mut().find(|c| c.0 == e.item) {
                Some(c) => c.1 += 1,
                None => counts.push((e.item, 1)),
            }
        }
        let expected = top_c(&counts, capacity);
        if cache::select_top_c(&counts, capacity) != expected {
            return Err(format!("trace {seed}: top-C selection differs in hour {h}"));
        }
        sets.push(expected);
    }
    let static_hits: Vec<bool> = events.iter().map(|e| sets[hour_of(e.timestamp)].contains(&e.item)).collect();
    if totals(&cache::run_static_hours("top-c", &events, &sets, capacity)) != per_hour(&events, &static_hits) {
        return Err(format!("trace {seed}: top-C hourly totals differ"));
    }
    Ok(())
}

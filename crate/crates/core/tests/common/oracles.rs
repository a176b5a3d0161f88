//! Direct evaluators written against the formulas, sharing no code with the
//! library beyond reading parameter tensors.

use atagnn::aggregate::{self, AgedMessageSet, AggregatorConfig, AggregatorKind, MaskOrientation};
use atagnn::autodiff::Graph;
use atagnn::embed::{self, EmbedConfig};
use atagnn::params::ParameterSet;
use atagnn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{attention_config, gat_config};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W` for a row vector and a row-major `[in, out]` matrix.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = w.dims2();
    assert_eq!(x.len(), rows);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w.get(i, j)).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked_softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let live: Vec<f64> = logits.iter().zip(keep).filter(|(_, &k)| k).map(|(&l, _)| l).collect();
    if live.is_empty() {
        return vec![0.0; logits.len()];
    }
    let top = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = live.iter().map(|l| (l - top).exp()).sum();
    logits
        .iter()
        .zip(keep)
        .map(|(&l, &k)| if k { (l - top).exp() / total } else { 0.0 })
        .collect()
}

fn p<'a>(params: &'a ParameterSet, name: &str) -> &'a Tensor {
    params.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// Per-head attention weights of every group, `[head][group][slot]`.
pub fn aggregator_attention(
    params: &ParameterSet,
    cfg: &AggregatorConfig,
    set: &AgedMessageSet,
) -> Vec<Vec<Vec<f64>>> {
    let n = set.slots;
    let omega = p(params, aggregate::names::OMEGA).data().to_vec();
    let scale = (1.0 / omega.len() as f64).sqrt();
    let mut out = vec![Vec::new(); cfg.heads];
    for gi in 0..set.groups {
        let births = &set.births[gi * n..(gi + 1) * n];
        let real = &set.mask[gi * n..(gi + 1) * n];
        let mut multiplier = vec![1.0; n];
        let mut active = real.to_vec();
        if cfg.kind == AggregatorKind::AoiAttention {
            let inputs: Vec<f64> = (0..n)
                .map(|j| if real[j] { (set.reference - births[j]) / cfg.age_scale } else { 0.0 })
                .collect();
            let hidden: Vec<f64> = vecmat(&inputs, p(params, aggregate::names::AOI_W1))
                .iter()
                .zip(p(params, aggregate::names::AOI_B1).data())
                .map(|(h, b)| (h + b).max(0.0))
                .collect();
            let thre = (vecmat(&hidden, p(params, aggregate::names::AOI_W2))[0]
                + p(params, aggregate::names::AOI_B2).data()[0])
                .max(0.0);
            for j in 1..n {
                let signal = match cfg.orientation {
                    MaskOrientation::StaleDrops => thre - inputs[j],
                    MaskOrientation::AsWritten => inputs[j] - thre,
                };
                multiplier[j] = sig(100.0 * signal);
                active[j] = real[j] && multiplier[j] >= cfg.drop_below;
            }
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let delta = births[0] - births[j] * multiplier[j];
                let mut row = set.features[(gi * n + j) * set.message_dim..(gi * n + j + 1) * set.message_dim].to_vec();
                row.extend(omega.iter().map(|w| scale * (w * delta).cos()));
                row
            })
            .collect();
        for (l, head) in out.iter_mut().enumerate() {
            let q = vecmat(&rows[0], p(params, &aggregate::names::head(l, "wq")));
            let logits: Vec<f64> = rows
                .iter()
                .map(|r| dot(&q, &vecmat(r, p(params, &aggregate::names::head(l, "wk")))))
                .collect();
            head.push(masked_softmax(&logits, &active));
        }
    }
    out
}

/// Per-head GAT weights, `[head][row][slot]`.
pub fn gat_attention(
    params: &ParameterSet,
    cfg: &EmbedConfig,
    own: &[Vec<f64>],
    neighbors: &[Vec<f64>],
    mask: &[bool],
) -> Vec<Vec<Vec<f64>>> {
    let n = neighbors.len() / own.len();
    (0..cfg.heads)
        .map(|h| {
            own.iter()
                .enumerate()
                .map(|(r, o)| {
                    let k = vecmat(o, p(params, &embed::names::head(1, h, "wk")));
                    let logits: Vec<f64> = (0..n)
                        .map(|j| dot(&k, &vecmat(&neighbors[r * n + j], p(params, &embed::names::head(1, h, "wq")))))
                        .collect();
                    masked_softmax(&logits, &mask[r * n..(r + 1) * n])
                })
                .collect()
        })
        .collect()
}

/// GRU step for one row.
pub fn gru(params: &ParameterSet, x: &[f64], m: &[f64]) -> Vec<f64> {
    let gate = |wh: &str, wm: &str, b: &str, state: &[f64]| -> Vec<f64> {
        let a = vecmat(x, p(params, wh));
        let c = vecmat(state, p(params, wm));
        a.iter().zip(&c).zip(p(params, b).data()).map(|((a, c), b)| a + c + b).collect()
    };
    let z: Vec<f64> = gate("gru.w_hz", "gru.w_mz", "gru.b_z", m).into_iter().map(sig).collect();
    let f: Vec<f64> = gate("gru.w_hf", "gru.w_mf", "gru.b_f", m).into_iter().map(sig).collect();
    let reset: Vec<f64> = f.iter().zip(m).map(|(f, m)| f * m).collect();
    let h: Vec<f64> = gate("gru.w_hh", "gru.w_mh", "gru.b_h", &reset).into_iter().map(f64::tanh).collect();
    (0..m.len()).map(|i| z[i] * h[i] + (1.0 - z[i]) * m[i]).collect()
}

pub fn bce(preds: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / preds.len() as f64
}

/// Pairwise count over every positive/negative pair.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Mean of precision@k over the ranks k of the positives; scores must be distinct.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut hits = 0.0;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1.0;
            total += hits / (k + 1) as f64;
        }
    }
    total / positives
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_set(rng: &mut ChaCha8Rng, cfg: &AggregatorConfig, dim: usize) -> AgedMessageSet {
    let groups = rng.random_range(1..4);
    let reference = 10.0;
    let mut set = AgedMessageSet::new(cfg.slots, dim, reference);
    for _ in 0..groups {
        let count = rng.random_range(1..=cfg.slots);
        let mut births: Vec<f64> = (0..count).map(|_| rng.random_range(7.0..10.0)).collect();
        births.sort_by(|a, b| b.total_cmp(a));
        let feats: Vec<Vec<f64>> = (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        set.push_group(feats.iter().map(Vec::as_slice).zip(births)).unwrap();
    }
    set
}

/// Worst deviation of the aggregator weights from the oracle.
pub fn aggregator_attention_trial(seed: u64, kind: AggregatorKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = attention_config(&mut rng, kind);
    cfg.slots = rng.random_range(2..6);
    if rng.random_bool(0.5) {
        cfg.orientation = MaskOrientation::AsWritten;
    }
    let (dim, time_dim, mem_dim) = (rng.random_range(1..5), rng.random_range(1..5), 3);
    let set = random_set(&mut rng, &cfg, dim);
    let mut params = ParameterSet::default();
    aggregate::init_params(&mut params, &cfg, dim, time_dim, mem_dim, &mut rng);
    params.insert(aggregate::names::OMEGA, Tensor::uniform(&[1, time_dim], 1.0, &mut rng));
    let mut g = Graph::new();
    let omegas = g.param(&params, aggregate::names::OMEGA).unwrap();
    let agg = aggregate::aggregate(&mut g, &params, &cfg, &set, omegas).unwrap();
    let expected = aggregator_attention(&params, &cfg, &set);
    assert_eq!(agg.attention.len(), cfg.heads);
    assert_eq!(g.value(agg.attention[0]).len(), set.groups * set.slots);
    agg.attention
        .iter()
        .zip(&expected)
        .map(|(&v, e)| max_diff(g.value(v).data(), &e.concat()))
        .fold(0.0, f64::max)
}

pub fn gat_attention_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = gat_config(&mut rng);
    let (rows, n, base, edge, time) = (
        rng.random_range(1..4),
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(0..3),
        rng.random_range(1..3),
    );
    gat_instance(&mut rng, &cfg, rows, n, base, edge, time)
}

pub fn gat_instance(
    rng: &mut ChaCha8Rng,
    cfg: &EmbedConfig,
    rows: usize,
    n: usize,
    base: usize,
    edge: usize,
    time: usize,
) -> f64 {
    let mut params = ParameterSet::default();
    embed::init_params(&mut params, cfg, base, edge, time, 3, rng);
    let own: Vec<Vec<f64>> = (0..rows).map(|_| (0..base).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let nbrs: Vec<Vec<f64>> = (0..rows * n)
        .map(|_| (0..base + edge + time).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mask: Vec<bool> = (0..rows * n).map(|_| rng.random_bool(0.7)).collect();
    let mut g = Graph::new();
    let own_v = g.constant(Tensor::from_rows(&own).unwrap());
    let nbr_v = g.constant(Tensor::from_rows(&nbrs).unwrap());
    let out = embed::gat_layer(&mut g, &params, cfg, 1, own_v, nbr_v, &mask).unwrap();
    let expected = gat_attention(&params, cfg, &own, &nbrs, &mask);
    assert_eq!(out.attention.len(), cfg.heads);
    out.attention
        .iter()
        .zip(&expected)
        .map(|(&v, e)| max_diff(g.value(v).data(), &e.concat()))
        .fold(0.0, f64::max)
}

pub fn gru_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, din, dm) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let mut params = ParameterSet::default();
    for gate in ["z", "f", "h"] {
        params.insert(format!("gru.w_h{gate}"), Tensor::uniform(&[din, dm], 1.0, &mut rng));
        params.insert(format!("gru.w_m{gate}"), Tensor::uniform(&[dm, dm], 1.0, &mut rng));
        params.insert(format!("gru.b_{gate}"), Tensor::uniform(&[1, dm], 1.0, &mut rng));
    }
    let x: Vec<Vec<f64>> = (0..rows).map(|_| (0..din).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let m: Vec<Vec<f64>> = (0..rows).map(|_| (0..dm).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_rows(&x).unwrap());
    let mv = g.constant(Tensor::from_rows(&m).unwrap());
    let out = aggregate::gru_update(&mut g, &params, xv, mv).unwrap();
    let expected: Vec<f64> = x.iter().zip(&m).flat_map(|(x, m)| gru(&params, x, m)).collect();
    max_diff(g.value(out).data(), &expected)
}

/// Worst deviation of both BCE paths (plain and on the tape) from the oracle.
pub fn bce_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..200);
    let preds: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let labels: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let expected = bce(&preds, &labels);
    let plain = embed::bce_loss(&preds, &labels).unwrap().loss;
    let mut g = Graph::new();
    let pv = g.constant(Tensor::column(preds));
    let tape = g.bce(pv, &labels).unwrap();
    (plain - expected).abs().max((g.value(tape).item() - expected).abs())
}

fn scored_instance(rng: &mut ChaCha8Rng, ties: bool) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=1000);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..1.0);
            if ties {
                (s * 8.0).floor() / 8.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

pub fn auc_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ties = seed % 2 == 0;
    let (scores, labels) = scored_instance(&mut rng, ties);
    (atagnn::metrics::auc(&scores, &labels).unwrap() - auc(&scores, &labels)).abs()
}

pub fn ap_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scores, labels) = scored_instance(&mut rng, false);
    (atagnn::metrics::average_precision(&scores, &labels).unwrap() - average_precision(&scores, &labels)).abs()
}

pub type Trial = fn(u64) -> f64;

pub fn suite() -> Vec<(&'static str, Trial)> {
    vec![
        ("aggregator attention", |s| aggregator_attention_trial(s, AggregatorKind::Attention)),
        ("AoI aggregator attention", |s| aggregator_attention_trial(s, AggregatorKind::AoiAttention)),
        ("GAT attention", gat_attention_trial),
        ("GRU", gru_trial),
        ("BCE", bce_trial),
        ("AUC", auc_trial),
        ("AP", ap_trial),
    ]
}

pub fn worst_over(trial: Trial, instances: u64) -> f64 {
    (0..instances).map(trial).fold(0.0, f64::max)
}

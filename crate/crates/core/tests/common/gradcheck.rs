//! Central finite-difference checks against the tape gradients.

use std::collections::BTreeMap;

use atagnn::aggregate::{self, AgedMessageSet, AggregatorConfig, AggregatorKind, MaskOrientation};
use atagnn::autodiff::{Graph, Var};
use atagnn::embed::{self, EmbedConfig};
use atagnn::events::InteractionEvent;
use atagnn::model::{Model, ModelConfig, ModelState};
use atagnn::params::ParameterSet;
use atagnn::tensor::Tensor;
use atagnn::time_encoding::encode_on_graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every entry of `set`.
pub fn compare<F>(set: &ParameterSet, analytic: &BTreeMap<String, Tensor>, loss: F) -> f64
where
    F: Fn(&ParameterSet) -> f64,
{
    let mut worst: f64 = 0.0;
    for (name, value) in set.iter() {
        let grad = analytic.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; value.len()]);
        for k in 0..value.len() {
            let mut plus = set.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += H;
            let mut minus = set.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grad[k], numeric));
        }
    }
    worst
}

/// Checks an op whose differentiable inputs are all entries of `set`; the
/// output is reduced to a scalar with fixed random weights so the whole
/// Jacobian is exercised.
pub fn check_op<B>(set: &ParameterSet, rng: &mut ChaCha8Rng, build: B) -> f64
where
    B: Fn(&mut Graph, &ParameterSet) -> Var,
{
    let shape = {
        let mut g = Graph::new();
        let out = build(&mut g, set);
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::uniform(&shape, 1.0, rng);
    let scalar = |g: &mut Graph, s: &ParameterSet| {
        let out = build(g, s);
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let mut g = Graph::new();
    let root = scalar(&mut g, set);
    let analytic = g.backward(root).unwrap().params();
    compare(set, &analytic, |s| {
        let mut g = Graph::new();
        let root = scalar(&mut g, s);
        g.value(root).item()
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::uniform(shape, bound, rng)
}

pub fn time_encoder_trial(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..5);
    let d = rng.random_range(1..6);
    let mut set = ParameterSet::default();
    let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    set.insert("deltas", Tensor::column(deltas));
    set.insert("omega", uniform(rng, &[1, d], 1.0));
    check_op(&set, rng, |g, s| {
        let x = g.param(s, "deltas").unwrap();
        let w = g.param(s, "omega").unwrap();
        encode_on_graph(g, x, w).unwrap()
    })
}

pub fn threshold_trial(rng: &mut ChaCha8Rng) -> f64 {
    let groups = rng.random_range(1..4);
    let n = rng.random_range(1..5);
    let hidden = rng.random_range(1..5);
    let mut set = ParameterSet::default();
    set.insert("ages", Tensor::uniform(&[groups, n], 2.0, rng).map(f64::abs));
    set.insert(aggregate::names::AOI_W1, uniform(rng, &[n, hidden], 1.0));
    set.insert(aggregate::names::AOI_B1, uniform(rng, &[1, hidden], 1.0));
    set.insert(aggregate::names::AOI_W2, uniform(rng, &[hidden, 1], 1.0));
    set.insert(aggregate::names::AOI_B2, Tensor::scalar(rng.random_range(0.5..2.0)));
    check_op(&set, rng, |g, s| {
        let ages = g.param(s, "ages").unwrap();
        aggregate::threshold_on_graph(g, s, ages).unwrap()
    })
}

pub fn soft_mask_trial(rng: &mut ChaCha8Rng) -> f64 {
    let groups = rng.random_range(1..4);
    let n = rng.random_range(1..5);
    let thre: Vec<f64> = (0..groups).map(|_| rng.random_range(0.1..1.0)).collect();
    // Ages within a few slope widths of the threshold keep the sigmoid live.
    let mut ages = Vec::with_capacity(groups * n);
    for &t in &thre {
        for _ in 0..n {
            ages.push(t + rng.random_range(-0.05..0.05));
        }
    }
    let orientation = if rng.random_bool(0.5) {
        MaskOrientation::StaleDrops
    } else {
        MaskOrientation::AsWritten
    };
    let mut set = ParameterSet::default();
    set.insert("thre", Tensor::column(thre));
    set.insert("ages", Tensor::matrix(groups, n, ages).unwrap());
    set.insert("births", uniform(rng, &[groups, n], 5.0));
    check_op(&set, rng, move |g, s| {
        let thre = g.param(s, "thre").unwrap();
        let ages = g.param(s, "ages").unwrap();
        let births = g.param(s, "births").unwrap();
        let (m, adjusted) = aggregate::soft_mask_on_graph(g, thre, ages, births, orientation).unwrap();
        g.concat_cols(&[m, adjusted]).unwrap()
    })
}

/// A random message set whose slot ages sit near the threshold scale.
fn message_set(rng: &mut ChaCha8Rng, groups: usize, slots: usize, dim: usize) -> AgedMessageSet {
    let reference = 10.0;
    let mut set = AgedMessageSet::new(slots, dim, reference);
    for _ in 0..groups {
        let count = rng.random_range(1..=slots);
        let mut births: Vec<f64> = (0..count).map(|_| rng.random_range(8.0..10.0)).collect();
        births.sort_by(|a, b| b.total_cmp(a));
        let feats: Vec<Vec<f64>> = (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        set.push_group(feats.iter().map(Vec::as_slice).zip(births)).unwrap();
    }
    set
}

pub fn attention_config(rng: &mut ChaCha8Rng, kind: AggregatorKind) -> AggregatorConfig {
    AggregatorConfig {
        kind,
        slots: rng.random_range(1..5),
        heads: rng.random_range(1..4),
        head_dim: rng.random_range(1..4),
        ffn_hidden: rng.random_range(1..5),
        threshold_hidden: rng.random_range(1..4),
        age_scale: 1.0,
        initial_threshold: rng.random_range(0.5..2.0),
        ..AggregatorConfig::default()
    }
}

/// Attention heads through the FFN, with the AoI filter when `kind` asks
/// for it. Differentiates every aggregator parameter and the frequencies.
pub fn attention_trial(rng: &mut ChaCha8Rng, kind: AggregatorKind) -> f64 {
    let cfg = attention_config(rng, kind);
    let (dim, time_dim, mem_dim) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let groups = rng.random_range(1..4);
    let set = message_set(rng, groups, cfg.slots, dim);
    let mut params = ParameterSet::default();
    aggregate::init_params(&mut params, &cfg, dim, time_dim, mem_dim, rng);
    params.insert(aggregate::names::OMEGA, uniform(rng, &[1, time_dim], 1.0));
    if kind == AggregatorKind::AoiAttention {
        let w2 = params.get_mut(aggregate::names::AOI_W2).unwrap();
        for x in w2.data_mut() {
            *x *= 0.05;
        }
    }
    for gru in aggregate::names::GRU {
        params.remove(gru);
    }
    check_op(&params, rng, |g, s| {
        let omegas = g.param(s, aggregate::names::OMEGA).unwrap();
        aggregate::aggregate(g, s, &cfg, &set, omegas).unwrap().output
    })
}

pub fn ffn_trial(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, din, hidden, dout) = (
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..6),
        rng.random_range(1..5),
    );
    let mut set = ParameterSet::default();
    set.insert("x", uniform(rng, &[rows, din], 1.0));
    set.insert(aggregate::names::FFN_W0, uniform(rng, &[din, hidden], 1.0));
    set.insert(aggregate::names::FFN_B0, uniform(rng, &[1, hidden], 1.0));
    set.insert(aggregate::names::FFN_W1, uniform(rng, &[hidden, dout], 1.0));
    set.insert(aggregate::names::FFN_B1, uniform(rng, &[1, dout], 1.0));
    check_op(&set, rng, |g, s| {
        let x = g.param(s, "x").unwrap();
        aggregate::feed_forward(g, s, x).unwrap()
    })
}

pub fn gru_trial(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, din, dm) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    let mut set = ParameterSet::default();
    set.insert("input", uniform(rng, &[rows, din], 1.0));
    set.insert("memory", uniform(rng, &[rows, dm], 1.0));
    for gate in ["z", "f", "h"] {
        set.insert(format!("gru.w_h{gate}"), uniform(rng, &[din, dm], 1.0));
        set.insert(format!("gru.w_m{gate}"), uniform(rng, &[dm, dm], 1.0));
        set.insert(format!("gru.b_{gate}"), uniform(rng, &[1, dm], 1.0));
    }
    check_op(&set, rng, |g, s| {
        let input = g.param(s, "input").unwrap();
        let memory = g.param(s, "memory").unwrap();
        aggregate::gru_update(g, s, input, memory).unwrap()
    })
}

pub fn gat_config(rng: &mut ChaCha8Rng) -> EmbedConfig {
    EmbedConfig {
        heads: rng.random_range(1..4),
        head_dim: rng.random_range(1..4),
        hidden: rng.random_range(1..5),
        layers: 1,
        predictor_hidden: rng.random_range(1..5),
    }
}

pub fn gat_trial(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = gat_config(rng);
    let (rows, n) = (rng.random_range(1..4), rng.random_range(1..5));
    let (base, edge, time, embed_dim) = (
        rng.random_range(1..5),
        rng.random_range(0..3),
        rng.random_range(1..3),
        rng.random_range(1..4),
    );
    let mut params = ParameterSet::default();
    embed::init_params(&mut params, &cfg, base, edge, time, embed_dim, rng);
    for name in [embed::names::PRED_W0, embed::names::PRED_B0, embed::names::PRED_W1, embed::names::PRED_B1] {
        params.remove(name);
    }
    params.insert("own", uniform(rng, &[rows, base], 1.0));
    params.insert("neighbors", uniform(rng, &[rows * n, base + edge + time], 1.0));
    let mask: Vec<bool> = (0..rows * n).map(|_| rng.random_bool(0.7)).collect();
    check_op(&params, rng, |g, s| {
        let own = g.param(s, "own").unwrap();
        let nbr = g.param(s, "neighbors").unwrap();
        embed::gat_layer(g, s, &cfg, 1, own, nbr, &mask).unwrap().embedding
    })
}

pub fn predictor_trial(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, d, hidden) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6));
    let mut set = ParameterSet::default();
    set.insert("users", uniform(rng, &[rows, d], 1.0));
    set.insert("items", uniform(rng, &[rows, d], 1.0));
    set.insert(embed::names::PRED_W0, uniform(rng, &[2 * d, hidden], 1.0));
    set.insert(embed::names::PRED_B0, uniform(rng, &[1, hidden], 1.0));
    set.insert(embed::names::PRED_W1, uniform(rng, &[hidden, 1], 1.0));
    set.insert(embed::names::PRED_B1, uniform(rng, &[1, 1], 1.0));
    check_op(&set, rng, |g, s| {
        let u = g.param(s, "users").unwrap();
        let i = g.param(s, "items").unwrap();
        embed::score(g, s, u, i).unwrap()
    })
}

pub type Trial = fn(&mut ChaCha8Rng) -> f64;

pub fn suite() -> Vec<(&'static str, Trial)> {
    vec![
        ("time encoder", time_encoder_trial),
        ("AoI threshold MLP", threshold_trial),
        ("soft mask", soft_mask_trial),
        ("attention heads", |r| attention_trial(r, AggregatorKind::Attention)),
        ("AoI-filtered attention", |r| attention_trial(r, AggregatorKind::AoiAttention)),
        ("FFN", ffn_trial),
        ("GRU", gru_trial),
        ("GAT", gat_trial),
        ("predictor MLP", predictor_trial),
    ]
}

/// Worst relative error of `trial` over `trials` seeded instances.
pub fn worst_over(trial: Trial, trials: usize, seed: u64) -> f64 {
    (0..trials)
        .map(|k| trial(&mut ChaCha8Rng::seed_from_u64(seed * 1_000_003 + k as u64)))
        .fold(0.0, f64::max)
}

fn event(user: usize, item: usize, timestamp: f64) -> InteractionEvent {
    InteractionEvent {
        user,
        item,
        timestamp,
        edge_features: vec![0.1 * (user as f64 + 1.0), -0.2 * (item as f64 + 1.0)],
    }
}

/// Five events on three users and two items. The first three are recorded
/// but not yet folded into memory, so scoring the last two runs the whole
/// chain from the AoI filter through the GRU, the GAT and the predictor.
pub fn toy_graph() -> (atagnn::events::Trace, Vec<InteractionEvent>) {
    let events = vec![
        event(0, 0, 1.0),
        event(1, 0, 2.0),
        event(2, 0, 3.0),
        event(0, 0, 4.0),
        event(1, 1, 5.0),
    ];
    let trace = atagnn::events::Trace {
        events: events.clone(),
        num_users: 3,
        num_items: 2,
        edge_dim: 2,
        user_features: vec![vec![]; 3],
        item_features: vec![vec![]; 2],
    };
    (trace, events)
}

pub fn toy_model(kind: AggregatorKind, seed: u64) -> Model {
    let mut cfg = ModelConfig {
        node_feature_dim: 0,
        edge_dim: 2,
        memory_dim: 4,
        time_dim: 3,
        embed_dim: 4,
        neighbors: 3,
        time_span: 10.0,
        ..ModelConfig::default()
    };
    cfg.aggregator = AggregatorConfig {
        kind,
        slots: 3,
        heads: 2,
        head_dim: 3,
        ffn_hidden: 5,
        threshold_hidden: 3,
        // Ages of 2 and 3 seconds against a threshold of 0.035 hundred
        // seconds: the second slot survives with a multiplier near 0.6.
        age_scale: 100.0,
        initial_threshold: 0.035,
        ..AggregatorConfig::default()
    };
    cfg.embed = EmbedConfig {
        heads: 2,
        head_dim: 3,
        hidden: 5,
        layers: 1,
        predictor_hidden: 4,
    };
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    if let Some(w2) = model.params.get_mut(aggregate::names::AOI_W2) {
        for x in w2.data_mut() {
            *x *= 0.01;
        }
    }
    model
}

pub fn toy_state(model: &Model) -> (ModelState, Vec<InteractionEvent>) {
    let (trace, events) = toy_graph();
    let mut state = model.new_state(&trace);
    state.record(&events[..3]);
    (state, events[3..].to_vec())
}

/// Worst relative error of the full batch loss over every model parameter.
pub fn pipeline_error(seed: u64) -> f64 {
    let model = toy_model(AggregatorKind::AoiAttention, seed);
    let (state, batch) = toy_state(&model);
    let negatives = [1, 0];
    let pass = model.batch_pass(&state, &batch, &negatives).unwrap();
    let analytic = pass.gradients(&model.params).unwrap();
    compare(&model.params, &analytic, |p| {
        let m = Model::from_parts(model.config.clone(), p.clone()).unwrap();
        m.batch_pass(&state, &batch, &negatives).unwrap().loss()
    })
}

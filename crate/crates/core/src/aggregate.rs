//! Message aggregation and memory update.
//!
//! For every node whose memory is refreshed, the newest `N` stored messages
//! are turned into an aggregated vector and fed to a GRU together with the
//! node's previous memory. Four aggregators are available:
//!
//! * `latest` keeps only the newest message,
//! * `mean` averages all unpadded messages,
//! * `attention` runs multi-head attention keyed on the newest message,
//!   followed by a feed-forward network with a skip connection to the raw
//!   newest message,
//! * `aoi-attention` first computes each message's age, derives an adaptive
//!   staleness threshold from the age vector with a two-layer MLP, softly
//!   rescales message timestamps by `σ(100 · keep_signal)` and drops the
//!   messages the sigmoid votes out before running `attention`.
//!
//! All functions here operate on a batch of message sets at once: `G`
//! groups of `N` slots each, laid out row-major as `[G*N, ·]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::ModelError;
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::time_encoding::encode_on_graph;

type Result<T> = std::result::Result<T, ModelError>;

/// Steepness of the soft mask.
pub const SOFT_MASK_SLOPE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Latest,
    Mean,
    Attention,
    AoiAttention,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Latest,
        AggregatorKind::Mean,
        AggregatorKind::Attention,
        AggregatorKind::AoiAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Latest => "latest",
            AggregatorKind::Mean => "mean",
            AggregatorKind::Attention => "attention",
            AggregatorKind::AoiAttention => "aoi-attention",
        }
    }

    /// The model family label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            AggregatorKind::Latest => "TGN-L",
            AggregatorKind::Mean => "TGN-M",
            AggregatorKind::Attention => "TGN-A",
            AggregatorKind::AoiAttention => "ATAGNN",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, AggregatorKind::Attention | AggregatorKind::AoiAttention)
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown aggregator `{s}`; expected one of: {}", names.join(", "))
        })
    }
}

/// Which side of the threshold the soft mask keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOrientation {
    /// `σ(100·(age − thre))`: keeps messages older than the threshold.
    AsWritten,
    /// `σ(100·(thre − age))`: keeps messages no older than the threshold.
    #[default]
    StaleDrops,
}

impl std::str::FromStr for MaskOrientation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "as-written" => Ok(Self::AsWritten),
            "stale-drops" => Ok(Self::StaleDrops),
            _ => Err(format!("unknown orientation `{s}`; expected as-written or stale-drops")),
        }
    }
}

/// Activation wrapped around each head's weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadActivation {
    #[default]
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    /// Message slots per node (`N`).
    pub slots: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub threshold_hidden: usize,
    pub orientation: MaskOrientation,
    pub head_activation: HeadActivation,
    /// Seconds per age unit seen by the threshold net and the soft mask.
    pub age_scale: f64,
    /// Initial bias of the threshold net's output, in age units.
    pub initial_threshold: f64,
    /// Messages whose mask multiplier falls below this are dropped.
    pub drop_below: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::AoiAttention,
            slots: 10,
            heads: 3,
            head_dim: 16,
            ffn_hidden: 32,
            threshold_hidden: 8,
            orientation: MaskOrientation::StaleDrops,
            head_activation: HeadActivation::Identity,
            age_scale: 3600.0,
            initial_threshold: 24.0,
            drop_below: 0.5,
        }
    }
}

pub mod names {
    pub const OMEGA: &str = "time.omega";
    pub const AOI_W1: &str = "aoi.w1";
    pub const AOI_B1: &str = "aoi.b1";
    pub const AOI_W2: &str = "aoi.w2";
    pub const AOI_B2: &str = "aoi.b2";
    pub const FFN_W0: &str = "ffn.w0";
    pub const FFN_B0: &str = "ffn.b0";
    pub const FFN_W1: &str = "ffn.w1";
    pub const FFN_B1: &str = "ffn.b1";

    pub fn head(l: usize, which: &str) -> String {
        format!("attn.h{l}.{which}")
    }

    pub const GRU: [&str; 9] = [
        "gru.w_hz", "gru.w_mz", "gru.b_z", "gru.w_hf", "gru.w_mf", "gru.b_f", "gru.w_hh", "gru.w_mh", "gru.b_h",
    ];
}

/// Width of the aggregated vector handed to the GRU.
pub fn output_dim(cfg: &AggregatorConfig, message_dim: usize, time_dim: usize, memory_dim: usize) -> usize {
    if cfg.kind.uses_attention() {
        memory_dim
    } else {
        message_dim + time_dim
    }
}

/// Adds every parameter the aggregator and GRU need.
pub fn init_params<R: Rng + ?Sized>(
    set: &mut ParameterSet,
    cfg: &AggregatorConfig,
    message_dim: usize,
    time_dim: usize,
    memory_dim: usize,
    rng: &mut R,
) {
    let row = message_dim + time_dim;
    if cfg.kind == AggregatorKind::AoiAttention {
        set.init_weight(names::AOI_W1, cfg.slots, cfg.threshold_hidden, rng);
        set.init_bias(names::AOI_B1, cfg.slots, cfg.threshold_hidden, rng);
        set.init_weight(names::AOI_W2, cfg.threshold_hidden, 1, rng);
        set.insert(names::AOI_B2, Tensor::scalar(cfg.initial_threshold));
    }
    if cfg.kind.uses_attention() {
        for l in 0..cfg.heads {
            for which in ["wq", "wk", "wv"] {
                set.init_weight(&names::head(l, which), row, cfg.head_dim, rng);
            }
        }
        let ffn_in = cfg.heads * cfg.head_dim + message_dim;
        set.init_weight(names::FFN_W0, ffn_in, cfg.ffn_hidden, rng);
        set.init_bias(names::FFN_B0, ffn_in, cfg.ffn_hidden, rng);
        set.init_weight(names::FFN_W1, cfg.ffn_hidden, memory_dim, rng);
        set.init_bias(names::FFN_B1, cfg.ffn_hidden, memory_dim, rng);
    }
    let input = output_dim(cfg, message_dim, time_dim, memory_dim);
    for gate in ["z", "f", "h"] {
        set.init_weight(&format!("gru.w_h{gate}"), input, memory_dim, rng);
        set.init_weight(&format!("gru.w_m{gate}"), memory_dim, memory_dim, rng);
        set.init_bias(&format!("gru.b_{gate}"), memory_dim, memory_dim, rng);
    }
}

/// `G` message sets of `N` slots each, newest message in slot 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AgedMessageSet {
    pub groups: usize,
    pub slots: usize,
    pub message_dim: usize,
    /// `[G*N, message_dim]`, zero rows for padding.
    pub features: Vec<f64>,
    /// Birth timestamp per slot (0 for padding).
    pub births: Vec<f64>,
    /// `true` for slots holding a real message.
    pub mask: Vec<bool>,
    /// Reference time the ages are measured from.
    pub reference: f64,
}

impl AgedMessageSet {
    pub fn new(slots: usize, message_dim: usize, reference: f64) -> Self {
        Self {
            groups: 0,
            slots,
            message_dim,
            features: Vec::new(),
            births: Vec::new(),
            mask: Vec::new(),
            reference,
        }
    }

    /// Appends one group from newest-first `(features, birth)` pairs; at
    /// most `slots` are used and the rest is padding.
    pub fn push_group<'a, I>(&mut self, messages: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut used = 0;
        for (features, birth) in messages.into_iter().take(self.slots) {
            if features.len() != self.message_dim {
                return Err(ModelError::DimensionMismatch {
                    what: "message features",
                    expected: self.message_dim,
                    got: features.len(),
                });
            }
            self.features.extend_from_slice(features);
            self.births.push(birth);
            self.mask.push(true);
            used += 1;
        }
        for _ in used..self.slots {
            self.features.extend(std::iter::repeat_n(0.0, self.message_dim));
            self.births.push(0.0);
            self.mask.push(false);
        }
        self.groups += 1;
        Ok(())
    }

    /// Ages of every slot; padded slots get `+inf`.
    pub fn ages(&self) -> Result<Vec<f64>> {
        compute_ages(&self.births, &self.mask, self.reference)
    }
}

/// `age = t − birth` for real slots, `+inf` for padded ones.
pub fn compute_ages(births: &[f64], mask: &[bool], t: f64) -> Result<Vec<f64>> {
    births
        .iter()
        .zip(mask)
        .map(|(&b, &real)| {
            if !real {
                Ok(f64::INFINITY)
            } else if b > t {
                Err(ModelError::BirthAfterReference { birth: b, reference: t })
            } else {
                Ok(t - b)
            }
        })
        .collect()
}

/// Ages as the threshold net sees them: scaled, with padding as 0.
pub fn threshold_inputs(ages: &[f64], age_scale: f64) -> Vec<f64> {
    ages.iter()
        .map(|&a| if a.is_finite() { a / age_scale } else { 0.0 })
        .collect()
}

pub fn keep_signal(age: f64, threshold: f64, orientation: MaskOrientation) -> f64 {
    match orientation {
        MaskOrientation::AsWritten => age - threshold,
        MaskOrientation::StaleDrops => threshold - age,
    }
}

/// `t' = t · σ(100 · keep_signal(age, thre))`, elementwise.
pub fn soft_mask(timestamps: &[f64], ages: &[f64], threshold: f64, orientation: MaskOrientation) -> Result<Vec<f64>> {
    if timestamps.len() != ages.len() {
        return Err(ModelError::DimensionMismatch {
            what: "soft mask inputs",
            expected: timestamps.len(),
            got: ages.len(),
        });
    }
    Ok(timestamps
        .iter()
        .zip(ages)
        .map(|(&t, &a)| t * sigmoid(SOFT_MASK_SLOPE * keep_signal(a, threshold, orientation)))
        .collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `thre = ReLU(ReLU(a·W1 + b1)·W2 + b2)` for a `[G, N]` age matrix.
pub fn threshold_on_graph(g: &mut Graph, params: &ParameterSet, ages: Var) -> Result<Var> {
    let w1 = g.param(params, names::AOI_W1)?;
    let b1 = g.param(params, names::AOI_B1)?;
    let w2 = g.param(params, names::AOI_W2)?;
    let b2 = g.param(params, names::AOI_B2)?;
    let n = g.value(w1).rows();
    if g.value(ages).cols() != n {
        return Err(ModelError::DimensionMismatch {
            what: "age vector",
            expected: n,
            got: g.value(ages).cols(),
        });
    }
    let h = g.matmul(ages, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    let o = g.add(o, b2)?;
    Ok(g.relu(o))
}

/// Soft mask on a `[G, N]` block: multipliers `σ(100 · keep_signal)` with
/// slot 0 pinned to 1, and the rescaled timestamps `births · multipliers`.
/// `thre` is `[G, 1]`; `ages` must already be in threshold units.
pub fn soft_mask_on_graph(
    g: &mut Graph,
    thre: Var,
    ages: Var,
    births: Var,
    orientation: MaskOrientation,
) -> Result<(Var, Var)> {
    let n = g.value(ages).cols();
    let signal = match orientation {
        MaskOrientation::StaleDrops => g.sub(thre, ages)?,
        MaskOrientation::AsWritten => g.sub(ages, thre)?,
    };
    let steep = g.scale(signal, SOFT_MASK_SLOPE);
    let m = g.sigmoid(steep);
    let mut rest = vec![1.0; n];
    rest[0] = 0.0;
    let mut first = vec![0.0; n];
    first[0] = 1.0;
    let rest = g.constant(Tensor::row(rest));
    let first = g.constant(Tensor::row(first));
    let m = g.mul(m, rest)?;
    let m = g.add(m, first)?;
    let adjusted = g.mul(births, m)?;
    Ok((m, adjusted))
}

/// Intermediate values of one aggregation, exposed for inspection.
#[derive(Clone, Debug)]
pub struct Aggregated {
    /// `[G, out_dim]` aggregated vectors.
    pub output: Var,
    /// Per-head `[G, N]` attention weights (attention aggregators only).
    pub attention: Vec<Var>,
    /// `[G, 1]` thresholds (AoI aggregator only).
    pub threshold: Option<Var>,
    /// `[G, N]` mask multipliers, slot 0 pinned to 1 (AoI aggregator only).
    pub multipliers: Option<Var>,
    /// Slots that took part in attention / averaging.
    pub active: Vec<bool>,
}

/// Aggregates every group of `set`. `omegas` is the `[1, d_T]` frequency row.
pub fn aggregate(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &AggregatorConfig,
    set: &AgedMessageSet,
    omegas: Var,
) -> Result<Aggregated> {
    let (groups, n, d) = (set.groups, set.slots, set.message_dim);
    if (0..groups).any(|i| !set.mask[i * n]) {
        return Err(ModelError::AllMasked);
    }
    let firsts: Vec<usize> = (0..groups).map(|i| i * n).collect();
    let births = Tensor::matrix(groups, n, set.births.clone()).map_err(crate::error::AutodiffError::from)?;
    let newest: Vec<f64> = firsts.iter().map(|&i| set.births[i]).collect();

    let mut threshold = None;
    let mut multipliers = None;
    let mut active = set.mask.clone();

    // Effective timestamps entering the time encoder.
    let effective = if cfg.kind == AggregatorKind::AoiAttention {
        let ages = set.ages()?;
        let inputs = threshold_inputs(&ages, cfg.age_scale);
        let ages_var = g.constant(Tensor::matrix(groups, n, inputs).map_err(crate::error::AutodiffError::from)?);
        let thre = threshold_on_graph(g, params, ages_var)?;
        let births_var = g.constant(births);
        let (m, adjusted) = soft_mask_on_graph(g, thre, ages_var, births_var, cfg.orientation)?;
        for (slot, &mult) in active.iter_mut().zip(g.value(m).data()) {
            *slot = *slot && mult >= cfg.drop_below;
        }
        threshold = Some(thre);
        multipliers = Some(m);
        adjusted
    } else {
        g.constant(births)
    };

    let newest_var = g.constant(Tensor::column(newest));
    let delta = g.sub(newest_var, effective)?;
    let delta = g.reshape(delta, &[groups * n, 1])?;
    let phi = encode_on_graph(g, delta, omegas)?;
    let raw = g.constant(Tensor::matrix(groups * n, d, set.features.clone()).map_err(crate::error::AutodiffError::from)?);
    let msg = g.concat_cols(&[raw, phi])?;

    let (output, attention) = match cfg.kind {
        AggregatorKind::Latest => (g.select_rows(msg, &firsts)?, Vec::new()),
        AggregatorKind::Mean => (g.group_mean(msg, &active, n)?, Vec::new()),
        AggregatorKind::Attention | AggregatorKind::AoiAttention => {
            let query_rows = g.select_rows(msg, &firsts)?;
            let mut heads = Vec::with_capacity(cfg.heads + 1);
            let mut weights = Vec::with_capacity(cfg.heads);
            for l in 0..cfg.heads {
                let wq = g.param(params, &names::head(l, "wq"))?;
                let wk = g.param(params, &names::head(l, "wk"))?;
                let wv = g.param(params, &names::head(l, "wv"))?;
                let q = g.matmul(query_rows, wq)?;
                let k = g.matmul(msg, wk)?;
                let v = g.matmul(msg, wv)?;
                let logits = g.group_dot(q, k)?;
                let alpha = g.softmax_rows(logits, Some(&active))?;
                let mut h = g.group_weighted_sum(alpha, v)?;
                if cfg.head_activation == HeadActivation::Sigmoid {
                    h = g.sigmoid(h);
                }
                heads.push(h);
                weights.push(alpha);
            }
            heads.push(g.select_rows(raw, &firsts)?);
            let x = g.concat_cols(&heads)?;
            let out = feed_forward(g, params, x)?;
            (out, weights)
        }
    };
    Ok(Aggregated {
        output,
        attention,
        threshold,
        multipliers,
        active,
    })
}

/// `ReLU(x·W0 + b0)·W1 + b1`.
pub fn feed_forward(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
    let w0 = g.param(params, names::FFN_W0)?;
    let b0 = g.param(params, names::FFN_B0)?;
    let w1 = g.param(params, names::FFN_W1)?;
    let b1 = g.param(params, names::FFN_B1)?;
    let h = g.matmul(x, w0)?;
    let h = g.add(h, b0)?;
    let h = g.relu(h);
    let o = g.matmul(h, w1)?;
    Ok(g.add(o, b1)?)
}

/// GRU memory update with the update gate weighting the candidate state:
/// `Mem' = Z·H + (1 − Z)·Mem`.
pub fn gru_update(g: &mut Graph, params: &ParameterSet, input: Var, memory: Var) -> Result<Var> {
    let [w_hz, w_mz, b_z, w_hf, w_mf, b_f, w_hh, w_mh, b_h] = names::GRU;
    let whz = g.param(params, w_hz)?;
    let in_dim = g.value(whz).rows();
    let mem_dim = g.value(whz).cols();
    if g.value(input).cols() != in_dim {
        return Err(ModelError::DimensionMismatch {
            what: "GRU input",
            expected: in_dim,
            got: g.value(input).cols(),
        });
    }
    if g.value(memory).cols() != mem_dim || g.value(memory).rows() != g.value(input).rows() {
        return Err(ModelError::DimensionMismatch {
            what: "GRU memory",
            expected: mem_dim,
            got: g.value(memory).cols(),
        });
    }
    let gate = |g: &mut Graph, wh: &str, wm: &str, b: &str, state: Var| -> Result<Var> {
        let wh = g.param(params, wh)?;
        let wm = g.param(params, wm)?;
        let b = g.param(params, b)?;
        let a = g.matmul(input, wh)?;
        let c = g.matmul(state, wm)?;
        let s = g.add(a, c)?;
        Ok(g.add(s, b)?)
    };
    let z = gate(g, w_hz, w_mz, b_z, memory)?;
    let z = g.sigmoid(z);
    let f = gate(g, w_hf, w_mf, b_f, memory)?;
    let f = g.sigmoid(f);
    let reset = g.mul(f, memory)?;
    let h = gate(g, w_hh, w_mh, b_h, reset)?;
    let h = g.tanh(h);
    let zh = g.mul(z, h)?;
    let keep = g.scale(z, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let old = g.mul(keep, memory)?;
    Ok(g.add(zh, old)?)
}

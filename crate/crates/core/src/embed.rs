//! Final node embeddings, preference scoring and the training loss.
//!
//! The embedding layer is a graph attention layer over a node's temporal
//! neighbors. Scores are plain dot products between projections, without the
//! LeakyReLU of the original GAT:
//!
//! `α_jk = softmax_k( (h̃_k·W_Q) · (h̃_j·W_K) )`
//!
//! where `h̃_j` is the node's own representation (memory concatenated with the
//! encoded time since its last interaction) and `h̃_k` the representation of
//! neighbor `k` concatenated with the edge features and the encoded age of
//! that interaction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MetricError, ModelError};
use crate::params::ParameterSet;

type Result<T> = std::result::Result<T, ModelError>;

/// Predictions are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub predictor_hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_dim: 16,
            hidden: 32,
            layers: 1,
            predictor_hidden: 32,
        }
    }
}

pub mod names {
    pub fn head(layer: usize, head: usize, which: &str) -> String {
        format!("gat.l{layer}.h{head}.{which}")
    }

    pub fn out(layer: usize, which: &str) -> String {
        format!("gat.l{layer}.out.{which}")
    }

    pub const PRED_W0: &str = "pred.w0";
    pub const PRED_B0: &str = "pred.b0";
    pub const PRED_W1: &str = "pred.w1";
    pub const PRED_B1: &str = "pred.b1";
}

/// Input width of layer `layer` (1-based) for the node itself. `base_dim`
/// is the width of the raw representation fed to the first layer.
pub fn self_dim(layer: usize, base_dim: usize, embed_dim: usize) -> usize {
    if layer == 1 {
        base_dim
    } else {
        embed_dim
    }
}

pub fn init_params<R: Rng + ?Sized>(
    set: &mut ParameterSet,
    cfg: &EmbedConfig,
    base_dim: usize,
    edge_dim: usize,
    time_dim: usize,
    embed_dim: usize,
    rng: &mut R,
) {
    for layer in 1..=cfg.layers {
        let own = self_dim(layer, base_dim, embed_dim);
        let nbr = own + edge_dim + time_dim;
        for h in 0..cfg.heads {
            set.init_weight(&names::head(layer, h, "wq"), nbr, cfg.head_dim, rng);
            set.init_weight(&names::head(layer, h, "wk"), own, cfg.head_dim, rng);
            set.init_weight(&names::head(layer, h, "wv"), nbr, cfg.head_dim, rng);
        }
        let merged = cfg.heads * cfg.head_dim + own;
        set.init_weight(&names::out(layer, "w0"), merged, cfg.hidden, rng);
        set.init_bias(&names::out(layer, "b0"), merged, cfg.hidden, rng);
        set.init_weight(&names::out(layer, "w1"), cfg.hidden, embed_dim, rng);
        set.init_bias(&names::out(layer, "b1"), cfg.hidden, embed_dim, rng);
    }
    set.init_weight(names::PRED_W0, 2 * embed_dim, cfg.predictor_hidden, rng);
    set.init_bias(names::PRED_B0, 2 * embed_dim, cfg.predictor_hidden, rng);
    set.init_weight(names::PRED_W1, cfg.predictor_hidden, 1, rng);
    set.init_bias(names::PRED_B1, cfg.predictor_hidden, 1, rng);
}

#[derive(Clone, Debug)]
pub struct GatOutput {
    /// `[R, embed_dim]`.
    pub embedding: Var,
    /// Per-head `[R, N]` attention weights over neighbor slots.
    pub attention: Vec<Var>,
}

/// One attention layer. `own` is `[R, d_self]`, `neighbors` is `[R*N, d_nbr]`
/// and `mask` flags the real neighbor slots. Rows without any neighbor get
/// zero head outputs, so their embedding is a projection of `own` alone.
pub fn gat_layer(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &EmbedConfig,
    layer: usize,
    own: Var,
    neighbors: Var,
    mask: &[bool],
) -> Result<GatOutput> {
    let mut parts = Vec::with_capacity(cfg.heads + 1);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = g.param(params, &names::head(layer, h, "wq"))?;
        let wk = g.param(params, &names::head(layer, h, "wk"))?;
        let wv = g.param(params, &names::head(layer, h, "wv"))?;
        let q = g.matmul(neighbors, wq)?;
        let k = g.matmul(own, wk)?;
        let v = g.matmul(neighbors, wv)?;
        let logits = g.group_dot(k, q)?;
        let alpha = g.softmax_rows(logits, Some(mask))?;
        parts.push(g.group_weighted_sum(alpha, v)?);
        attention.push(alpha);
    }
    parts.push(own);
    let merged = g.concat_cols(&parts)?;
    let w0 = g.param(params, &names::out(layer, "w0"))?;
    let b0 = g.param(params, &names::out(layer, "b0"))?;
    let w1 = g.param(params, &names::out(layer, "w1"))?;
    let b1 = g.param(params, &names::out(layer, "b1"))?;
    let hidden = g.matmul(merged, w0)?;
    let hidden = g.add(hidden, b0)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(hidden, w1)?;
    let embedding = g.add(out, b1)?;
    Ok(GatOutput { embedding, attention })
}

/// `σ(ReLU([E_u ‖ E_i]·W0 + b0)·W1 + b1)` for row-aligned user and item
/// embeddings, giving `[R, 1]` probabilities.
pub fn score(g: &mut Graph, params: &ParameterSet, users: Var, items: Var) -> Result<Var> {
    let (ur, uc) = g.value(users).dims2();
    let (ir, ic) = g.value(items).dims2();
    if ur != ir || uc != ic {
        return Err(ModelError::DimensionMismatch {
            what: "score inputs",
            expected: uc,
            got: ic,
        });
    }
    let w0 = g.param(params, names::PRED_W0)?;
    if g.value(w0).rows() != uc + ic {
        return Err(ModelError::DimensionMismatch {
            what: "predictor input",
            expected: g.value(w0).rows(),
            got: uc + ic,
        });
    }
    let b0 = g.param(params, names::PRED_B0)?;
    let w1 = g.param(params, names::PRED_W1)?;
    let b1 = g.param(params, names::PRED_B1)?;
    let x = g.concat_cols(&[users, items])?;
    let h = g.matmul(x, w0)?;
    let h = g.add(h, b0)?;
    let h = g.relu(h);
    let o = g.matmul(h, w1)?;
    let o = g.add(o, b1)?;
    Ok(g.sigmoid(o))
}

/// Scores every user × item pair without building a graph. The first layer
/// is split into its user and item halves so each embedding is projected
/// once. Returns a row-major `[users, items]` matrix of probabilities.
pub fn score_all_pairs(params: &ParameterSet, users: &[Vec<f64>], items: &[Vec<f64>]) -> Result<Vec<f64>> {
    let get = |n: &str| {
        params
            .get(n)
            .ok_or_else(|| ModelError::Autodiff(crate::error::AutodiffError::UnknownParameter(n.into())))
    };
    let (w0, b0, w1, b1) = (get(names::PRED_W0)?, get(names::PRED_B0)?, get(names::PRED_W1)?, get(names::PRED_B1)?);
    let (rows, hidden) = w0.dims2();
    let dim = rows / 2;
    let project = |vectors: &[Vec<f64>], offset: usize| -> Result<Vec<Vec<f64>>> {
        vectors
            .iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(ModelError::DimensionMismatch {
                        what: "embedding",
                        expected: dim,
                        got: v.len(),
                    });
                }
                let mut out = vec![0.0; hidden];
                for (p, &x) in v.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(w0.row_slice(offset + p)) {
                        *o += x * w;
                    }
                }
                Ok(out)
            })
            .collect()
    };
    let pu = project(users, 0)?;
    let pi = project(items, dim)?;
    let mut out = Vec::with_capacity(users.len() * items.len());
    for u in &pu {
        for i in &pi {
            let mut z = b1.data()[0];
            for t in 0..hidden {
                let h = u[t] + i[t] + b0.data()[t];
                if h > 0.0 {
                    z += h * w1.data()[t];
                }
            }
            out.push(crate::aggregate::sigmoid(z));
        }
    }
    Ok(out)
}

/// Mean BCE and the number of predictions that had to be clamped.
pub(crate) fn bce_terms(preds: &[f64], labels: &[f64]) -> (f64, usize) {
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        if pc != p {
            clamped += 1;
        }
        total += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    }
    (total / preds.len() as f64, clamped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceLoss {
    pub loss: f64,
    pub clamped: usize,
}

/// `L = (1/n) Σ −(y log p + (1−y) log(1−p))`.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> std::result::Result<BceLoss, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::SingleClass);
    }
    let (loss, clamped) = bce_terms(preds, labels);
    Ok(BceLoss { loss, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_of_coin_flips_is_ln2() {
        let l = bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.clamped, 0);
    }

    #[test]
    fn bce_near_perfect_is_near_zero() {
        let l = bce_loss(&[1.0 - 1e-9, 1e-9], &[1.0, 0.0]).unwrap();
        assert!(l.loss < 1e-8);
        let exact = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(exact.clamped, 2);
        assert!(exact.loss.is_finite() && exact.loss < 1e-11);
    }

    #[test]
    fn bce_duplicated_batch_has_same_loss() {
        let a = bce_loss(&[0.3, 0.8], &[0.0, 1.0]).unwrap().loss;
        let b = bce_loss(&[0.3, 0.8, 0.3, 0.8], &[0.0, 1.0, 0.0, 1.0]).unwrap().loss;
        assert!((a - b).abs() < 1e-15);
    }

    fn zero_predictor(dim: usize) -> ParameterSet {
        let mut p = ParameterSet::default();
        p.insert(names::PRED_W0, Tensor::zeros(&[2 * dim, 4]));
        p.insert(names::PRED_B0, Tensor::zeros(&[1, 4]));
        p.insert(names::PRED_W1, Tensor::zeros(&[4, 1]));
        p.insert(names::PRED_B1, Tensor::zeros(&[1, 1]));
        p
    }

    #[test]
    fn zero_predictor_scores_half() {
        let p = zero_predictor(3);
        let mut g = Graph::new();
        let u = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let i = g.constant(Tensor::row(vec![-1.0, 0.0, 5.0]));
        let s = score(&mut g, &p, u, i).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn score_rejects_mismatched_inputs() {
        let p = zero_predictor(3);
        let mut g = Graph::new();
        let u = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let i = g.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(score(&mut g, &p, u, i).is_err());
    }

    #[test]
    fn pairwise_scores_match_graph() {
        let mut p = ParameterSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_params(&mut p, &EmbedConfig::default(), 7, 2, 3, 5, &mut rng);
        let users = vec![vec![0.1, -0.2, 0.3, 0.4, 0.5], vec![1.0, 0.0, -1.0, 0.5, 0.2]];
        let items = vec![vec![0.3, 0.3, 0.3, -0.3, 0.0], vec![-1.0, 2.0, 0.0, 0.1, 0.9], vec![0.0; 5]];
        let fast = score_all_pairs(&p, &users, &items).unwrap();
        for (a, u) in users.iter().enumerate() {
            for (b, it) in items.iter().enumerate() {
                let mut g = Graph::new();
                let uv = g.constant(Tensor::row(u.clone()));
                let iv = g.constant(Tensor::row(it.clone()));
                let s = score(&mut g, &p, uv, iv).unwrap();
                assert!((g.value(s).item() - fast[a * items.len() + b]).abs() < 1e-12);
            }
        }
    }
}

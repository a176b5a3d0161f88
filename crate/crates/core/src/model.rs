//! The complete link-prediction model and the mutable state it runs over.
//!
//! A [`Model`] owns only parameters. Everything that changes as events
//! stream in (memory, stored messages, the temporal neighbor index and the
//! set of nodes with unconsumed messages) lives in a [`ModelState`], so the
//! same parameters can drive several independent states.
//!
//! Processing a batch follows the usual temporal-graph-network ordering:
//!
//! 1. nodes with pending messages that the batch touches get their memory
//!    refreshed from stored messages (differentiably),
//! 2. users, positive items and negative items are embedded at the event
//!    time and scored,
//! 3. the refreshed memories are committed,
//! 4. the batch's own interactions are stored as new messages and neighbor
//!    records, so they only influence later batches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AgedMessageSet, AggregatorConfig};
use crate::autodiff::{Graph, Var};
use crate::embed::{self, EmbedConfig};
use crate::error::{AutodiffError, ModelError};
use crate::events::{InteractionEvent, MemoryStore, MessageBuffer, NeighborRecord, RawMessage, TemporalNeighborIndex, Trace};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::time_encoding::{encode_constant_column, geometric_omegas};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node_feature_dim: usize,
    pub edge_dim: usize,
    pub memory_dim: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    /// Temporal neighbors attended to per node.
    pub neighbors: usize,
    /// Longest period resolved by the initial time frequencies, in seconds.
    pub time_span: f64,
    pub aggregator: AggregatorConfig,
    pub embed: EmbedConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            node_feature_dim: 0,
            edge_dim: 0,
            memory_dim: 32,
            time_dim: 16,
            embed_dim: 32,
            neighbors: 10,
            time_span: 1e7,
            aggregator: AggregatorConfig::default(),
            embed: EmbedConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Width of a stored message: own features, counterpart features, edge
    /// features and the counterpart's memory.
    pub fn message_dim(&self) -> usize {
        2 * self.node_feature_dim + self.edge_dim + self.memory_dim
    }

    /// Width of the raw node representation entering the first GAT layer.
    pub fn base_dim(&self) -> usize {
        self.memory_dim + self.node_feature_dim + self.time_dim
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("memory dimension", self.memory_dim),
            ("time dimension", self.time_dim),
            ("embedding dimension", self.embed_dim),
            ("neighbor count", self.neighbors),
            ("message slots", self.aggregator.slots),
            ("GAT layers", self.embed.layers),
        ];
        for (what, v) in checks {
            if v == 0 {
                return Err(ModelError::DimensionMismatch { what, expected: 1, got: 0 });
            }
        }
        if self.aggregator.kind.uses_attention() && self.aggregator.heads == 0 {
            return Err(ModelError::DimensionMismatch {
                what: "attention heads",
                expected: 1,
                got: 0,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Everything about the event stream the model has seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub memory: MemoryStore,
    pub messages: MessageBuffer,
    pub neighbors: TemporalNeighborIndex,
    pending: BTreeSet<usize>,
    num_users: usize,
    features: Arc<Vec<Vec<f64>>>,
}

impl ModelState {
    /// Empty state for the nodes of `trace`. Missing node features are zeros.
    pub fn new(trace: &Trace, config: &ModelConfig) -> Self {
        let n = trace.num_nodes();
        let f = config.node_feature_dim;
        let pick = |v: Option<&Vec<f64>>| -> Vec<f64> {
            let mut out = vec![0.0; f];
            if let Some(v) = v {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = *x;
                }
            }
            out
        };
        let mut features = Vec::with_capacity(n);
        for u in 0..trace.num_users {
            features.push(pick(trace.user_features.get(u)));
        }
        for i in 0..trace.num_items {
            features.push(pick(trace.item_features.get(i)));
        }
        Self {
            memory: MemoryStore::new(n, config.memory_dim),
            messages: MessageBuffer::new(n, config.aggregator.slots),
            neighbors: TemporalNeighborIndex::new(n),
            pending: BTreeSet::new(),
            num_users: trace.num_users,
            features: Arc::new(features),
        }
    }

    pub fn user_node(&self, user: usize) -> usize {
        user
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn num_nodes(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, node: usize) -> &[f64] {
        &self.features[node]
    }

    /// Nodes holding messages not yet folded into their memory.
    pub fn pending(&self) -> &BTreeSet<usize> {
        &self.pending
    }

    /// Whether `node` has never interacted.
    pub fn is_rookie(&self, node: usize) -> bool {
        self.messages.len(node) == 0
    }

    /// Stores `events` as messages and neighbor records. The counterpart
    /// memory inside each message is read from the current memory store.
    pub fn record(&mut self, events: &[InteractionEvent]) {
        for e in events {
            let u = self.user_node(e.user);
            let i = self.item_node(e.item);
            let mu = self.message(u, i, &e.edge_features);
            let mi = self.message(i, u, &e.edge_features);
            self.messages.push(u, RawMessage { features: mu, birth: e.timestamp });
            self.messages.push(i, RawMessage { features: mi, birth: e.timestamp });
            self.neighbors.insert(
                u,
                NeighborRecord {
                    node: i,
                    edge_features: e.edge_features.clone(),
                    timestamp: e.timestamp,
                },
            );
            self.neighbors.insert(
                i,
                NeighborRecord {
                    node: u,
                    edge_features: e.edge_features.clone(),
                    timestamp: e.timestamp,
                },
            );
            self.pending.insert(u);
            self.pending.insert(i);
        }
    }

    fn message(&self, own: usize, other: usize, edge: &[f64]) -> Vec<f64> {
        let mut m = Vec::with_capacity(2 * self.features[own].len() + edge.len() + self.memory.dim());
        m.extend_from_slice(&self.features[own]);
        m.extend_from_slice(&self.features[other]);
        m.extend_from_slice(edge);
        m.extend_from_slice(self.memory.get(other));
        m
    }
}

/// Serializable part of a [`ModelState`]; node features come from the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub memory: MemoryStore,
    pub messages: MessageBuffer,
    pub neighbors: TemporalNeighborIndex,
    pub pending: BTreeSet<usize>,
    pub num_users: usize,
}

impl ModelState {
    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            memory: self.memory.clone(),
            messages: self.messages.clone(),
            neighbors: self.neighbors.clone(),
            pending: self.pending.clone(),
            num_users: self.num_users,
        }
    }

    /// Rebuilds a state from `snapshot` with the node features of `trace`.
    pub fn from_snapshot(snapshot: StateSnapshot, trace: &Trace, config: &ModelConfig) -> Result<Self> {
        let fresh = Self::new(trace, config);
        if snapshot.memory.num_nodes() != fresh.num_nodes() || snapshot.num_users != trace.num_users {
            return Err(ModelError::DimensionMismatch {
                what: "snapshot nodes",
                expected: fresh.num_nodes(),
                got: snapshot.memory.num_nodes(),
            });
        }
        if snapshot.memory.dim() != config.memory_dim {
            return Err(ModelError::DimensionMismatch {
                what: "snapshot memory",
                expected: config.memory_dim,
                got: snapshot.memory.dim(),
            });
        }
        Ok(Self {
            memory: snapshot.memory,
            messages: snapshot.messages,
            neighbors: snapshot.neighbors,
            pending: snapshot.pending,
            ..fresh
        })
    }
}

/// Memory refresh computed on a graph but not yet written back.
#[derive(Clone, Debug)]
pub struct MemoryUpdate {
    /// Refreshed nodes in row order.
    pub nodes: Vec<usize>,
    /// Newest message birth per refreshed node.
    pub times: Vec<f64>,
    /// `[nodes, memory_dim]`.
    pub memory: Var,
    pub aggregated: aggregate::Aggregated,
}

impl MemoryUpdate {
    /// Writes the refreshed memories into `state` and clears their pending flag.
    pub fn commit(&self, g: &Graph, state: &mut ModelState) {
        let value = g.value(self.memory);
        for (r, (&node, &t)) in self.nodes.iter().zip(&self.times).enumerate() {
            state.memory.set(node, value.row_slice(r).to_vec(), t);
            state.pending.remove(&node);
        }
    }
}

/// Embeddings of a list of `(node, time)` queries.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[queries, embed_dim]`.
    pub embeddings: Var,
    pub update: Option<MemoryUpdate>,
}

impl Forward {
    pub fn commit(&self, g: &Graph, state: &mut ModelState) {
        if let Some(u) = &self.update {
            u.commit(g, state);
        }
    }
}

/// A scored batch whose state changes have not been applied yet.
#[derive(Debug)]
pub struct BatchPass {
    pub graph: Graph,
    pub forward: Forward,
    /// `[R, 1]` positive probabilities.
    pub positive: Var,
    /// `[R, 1]` negative probabilities.
    pub negative: Var,
    pub loss: Var,
}

impl BatchPass {
    pub fn loss(&self) -> f64 {
        self.graph.value(self.loss).item()
    }

    pub fn positive_scores(&self) -> Vec<f64> {
        self.graph.value(self.positive).data().to_vec()
    }

    pub fn negative_scores(&self) -> Vec<f64> {
        self.graph.value(self.negative).data().to_vec()
    }

    /// Gradient of the loss for every parameter, zero for unused ones.
    pub fn gradients(&self, params: &ParameterSet) -> std::result::Result<BTreeMap<String, Tensor>, AutodiffError> {
        let mut grads = self.graph.backward(self.loss)?.params();
        params.complete_gradients(&mut grads);
        Ok(grads)
    }

    /// Commits refreshed memories, then records the batch's events.
    pub fn finish(self, state: &mut ModelState, events: &[InteractionEvent]) {
        self.forward.commit(&self.graph, state);
        state.record(events);
    }
}

/// Per-query bookkeeping shared by the recursive embedding.
struct EmbedContext<'a> {
    model: &'a Model,
    state: &'a ModelState,
    table: Var,
    rows: HashMap<usize, usize>,
    last: HashMap<usize, Option<f64>>,
    omegas: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::default();
        params.insert(
            aggregate::names::OMEGA,
            Tensor::row(geometric_omegas(config.time_dim, config.time_span)),
        );
        aggregate::init_params(
            &mut params,
            &config.aggregator,
            config.message_dim(),
            config.time_dim,
            config.memory_dim,
            rng,
        );
        embed::init_params(
            &mut params,
            &config.embed,
            config.base_dim(),
            config.edge_dim,
            config.time_dim,
            config.embed_dim,
            rng,
        );
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let omega = params
            .get(aggregate::names::OMEGA)
            .ok_or_else(|| AutodiffError::UnknownParameter(aggregate::names::OMEGA.into()))?;
        if omega.len() != config.time_dim {
            return Err(ModelError::DimensionMismatch {
                what: "time frequencies",
                expected: config.time_dim,
                got: omega.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn new_state(&self, trace: &Trace) -> ModelState {
        ModelState::new(trace, &self.config)
    }

    /// Refreshes the memory of `nodes` from their stored messages, with ages
    /// measured at `reference`. Returns `None` when `nodes` is empty.
    pub fn update_memories(
        &self,
        g: &mut Graph,
        state: &ModelState,
        nodes: &[usize],
        reference: f64,
    ) -> Result<Option<MemoryUpdate>> {
        if nodes.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let slots = cfg.aggregator.slots;
        let newest: Vec<f64> = nodes
            .iter()
            .map(|&n| state.messages.entries(n).next().map_or(f64::NEG_INFINITY, |m| m.birth))
            .collect();
        let reference = newest.iter().copied().fold(reference, f64::max);
        let mut set = AgedMessageSet::new(slots, cfg.message_dim(), reference);
        for &n in nodes {
            set.push_group(state.messages.entries(n).take(slots).map(|m| (m.features.as_slice(), m.birth)))?;
        }
        let omegas = g.param(&self.params, aggregate::names::OMEGA)?;
        let aggregated = aggregate::aggregate(g, &self.params, &cfg.aggregator, &set, omegas)?;
        let mut old = Vec::with_capacity(nodes.len() * cfg.memory_dim);
        for &n in nodes {
            old.extend_from_slice(state.memory.get(n));
        }
        let old = g.constant(Tensor::matrix(nodes.len(), cfg.memory_dim, old).map_err(AutodiffError::from)?);
        let memory = aggregate::gru_update(g, &self.params, aggregated.output, old)?;
        Ok(Some(MemoryUpdate {
            nodes: nodes.to_vec(),
            times: newest,
            memory,
            aggregated,
        }))
    }

    /// Embeds every `(node, time)` query. Pending messages of the nodes the
    /// embedding reads are folded into their memory first.
    pub fn forward(&self, g: &mut Graph, state: &ModelState, queries: &[(usize, f64)]) -> Result<Forward> {
        let k = self.config.neighbors;
        let mut needed: BTreeSet<usize> = BTreeSet::new();
        let mut frontier: Vec<(usize, f64)> = queries.to_vec();
        for hop in 0..=self.config.embed.layers {
            let mut next = Vec::new();
            for &(n, t) in &frontier {
                needed.insert(n);
                if hop < self.config.embed.layers {
                    next.extend(state.neighbors.before(n, t, k).into_iter().map(|r| (r.node, t)));
                }
            }
            frontier = next;
        }
        let reference = queries.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        let stale: Vec<usize> = needed.iter().copied().filter(|n| state.pending.contains(n)).collect();
        let update = self.update_memories(g, state, &stale, reference)?;

        let mut rows = HashMap::with_capacity(needed.len());
        let mut last = HashMap::with_capacity(needed.len());
        let mut blocks = Vec::new();
        if let Some(u) = &update {
            for (r, (&n, &t)) in u.nodes.iter().zip(&u.times).enumerate() {
                rows.insert(n, r);
                last.insert(n, Some(t));
            }
            blocks.push(u.memory);
        }
        let mut fixed = Vec::new();
        let mut count = rows.len();
        for &n in &needed {
            if rows.contains_key(&n) {
                continue;
            }
            rows.insert(n, count);
            count += 1;
            fixed.extend_from_slice(state.memory.get(n));
            let t = (!state.is_rookie(n)).then(|| state.memory.last_update(n));
            last.insert(n, t);
        }
        if !fixed.is_empty() {
            let m = self.config.memory_dim;
            let rows_fixed = fixed.len() / m;
            blocks.push(g.constant(Tensor::matrix(rows_fixed, m, fixed).map_err(AutodiffError::from)?));
        }
        let table = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(&blocks)? };
        let omegas = g.param(&self.params, aggregate::names::OMEGA)?;
        let ctx = EmbedContext {
            model: self,
            state,
            table,
            rows,
            last,
            omegas,
        };
        let embeddings = ctx.layer(g, self.config.embed.layers, queries)?;
        Ok(Forward { embeddings, update })
    }

    /// Scores each event against its positive item and one negative item.
    pub fn batch_pass(&self, state: &ModelState, events: &[InteractionEvent], negatives: &[usize]) -> Result<BatchPass> {
        if events.len() != negatives.len() {
            return Err(ModelError::DimensionMismatch {
                what: "negative samples",
                expected: events.len(),
                got: negatives.len(),
            });
        }
        let r = events.len();
        let mut queries = Vec::with_capacity(3 * r);
        queries.extend(events.iter().map(|e| (state.user_node(e.user), e.timestamp)));
        queries.extend(events.iter().map(|e| (state.item_node(e.item), e.timestamp)));
        queries.extend(events.iter().zip(negatives).map(|(e, &n)| (state.item_node(n), e.timestamp)));
        let mut g = Graph::new();
        let forward = self.forward(&mut g, state, &queries)?;
        let idx = |lo: usize| (lo..lo + r).collect::<Vec<_>>();
        let users = g.select_rows(forward.embeddings, &idx(0))?;
        let pos_items = g.select_rows(forward.embeddings, &idx(r))?;
        let neg_items = g.select_rows(forward.embeddings, &idx(2 * r))?;
        let positive = embed::score(&mut g, &self.params, users, pos_items)?;
        let negative = embed::score(&mut g, &self.params, users, neg_items)?;
        let preds = g.concat_rows(&[positive, negative])?;
        let mut labels = vec![1.0; r];
        labels.resize(2 * r, 0.0);
        let loss = g.bce(preds, &labels)?;
        Ok(BatchPass {
            graph: g,
            forward,
            positive,
            negative,
            loss,
        })
    }

    /// Applies a batch without computing any score.
    pub fn observe(&self, state: &mut ModelState, events: &[InteractionEvent]) -> Result<()> {
        let Some(t) = events.iter().map(|e| e.timestamp).reduce(f64::max) else {
            return Ok(());
        };
        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for e in events {
            touched.insert(state.user_node(e.user));
            touched.insert(state.item_node(e.item));
        }
        let stale: Vec<usize> = touched.into_iter().filter(|n| state.pending.contains(n)).collect();
        let mut g = Graph::new();
        if let Some(u) = self.update_memories(&mut g, state, &stale, t)? {
            u.commit(&g, state);
        }
        state.record(events);
        Ok(())
    }

    /// Folds every pending message into memory.
    pub fn flush(&self, state: &mut ModelState, reference: f64) -> Result<()> {
        let stale: Vec<usize> = state.pending.iter().copied().collect();
        let mut g = Graph::new();
        if let Some(u) = self.update_memories(&mut g, state, &stale, reference)? {
            u.commit(&g, state);
        }
        Ok(())
    }

    /// Embedding vectors of `nodes` at time `t`, leaving `state` untouched.
    pub fn embed_nodes(&self, state: &ModelState, nodes: &[usize], t: f64) -> Result<Vec<Vec<f64>>> {
        if nodes.is_empty() {
            return Ok(Vec::new());
        }
        let queries: Vec<(usize, f64)> = nodes.iter().map(|&n| (n, t)).collect();
        let mut g = Graph::new();
        let f = self.forward(&mut g, state, &queries)?;
        let e = g.value(f.embeddings);
        Ok((0..nodes.len()).map(|r| e.row_slice(r).to_vec()).collect())
    }
}

impl EmbedContext<'_> {
    fn deltas(&self, items: &[(usize, f64)]) -> Result<Vec<f64>> {
        items
            .iter()
            .map(|&(n, t)| match self.last[&n] {
                None => Ok(0.0),
                Some(last) if t < last => Err(ModelError::TargetBeforeLast { target: t, last }),
                Some(last) => Ok(t - last),
            })
            .collect()
    }

    /// Representation of `items` after `layer` GAT layers; layer 0 is the
    /// raw memory, features and encoded time since the last interaction.
    fn layer(&self, g: &mut Graph, layer: usize, items: &[(usize, f64)]) -> Result<Var> {
        let cfg = &self.model.config;
        if layer == 0 {
            let rows: Vec<usize> = items.iter().map(|(n, _)| self.rows[n]).collect();
            let mem = g.select_rows(self.table, &rows)?;
            let deltas = self.deltas(items)?;
            let phi = encode_constant_column(g, &deltas, self.omegas)?;
            let mut parts = vec![mem];
            if cfg.node_feature_dim > 0 {
                let mut feats = Vec::with_capacity(items.len() * cfg.node_feature_dim);
                for &(n, _) in items {
                    feats.extend_from_slice(self.state.feature(n));
                }
                parts.push(g.constant(
                    Tensor::matrix(items.len(), cfg.node_feature_dim, feats).map_err(AutodiffError::from)?,
                ));
            }
            parts.push(phi);
            return Ok(g.concat_cols(&parts)?);
        }
        let own = self.layer(g, layer - 1, items)?;
        let k = cfg.neighbors;
        let mut nbr_items = Vec::with_capacity(items.len() * k);
        let mut edges = Vec::with_capacity(items.len() * k * cfg.edge_dim);
        let mut ages = Vec::with_capacity(items.len() * k);
        let mut mask = Vec::with_capacity(items.len() * k);
        for &(n, t) in items {
            let found = self.state.neighbors.before(n, t, k);
            for slot in 0..k {
                match found.get(slot) {
                    Some(r) => {
                        nbr_items.push((r.node, t));
                        edges.extend_from_slice(&r.edge_features);
                        ages.push(t - r.timestamp);
                        mask.push(true);
                    }
                    None => {
                        nbr_items.push((n, t));
                        edges.extend(std::iter::repeat_n(0.0, cfg.edge_dim));
                        ages.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        let nbr_rep = self.layer(g, layer - 1, &nbr_items)?;
        let phi = encode_constant_column(g, &ages, self.omegas)?;
        let mut parts = vec![nbr_rep];
        if cfg.edge_dim > 0 {
            parts.push(g.constant(Tensor::matrix(nbr_items.len(), cfg.edge_dim, edges).map_err(AutodiffError::from)?));
        }
        parts.push(phi);
        let neighbors = g.concat_cols(&parts)?;
        let out = embed::gat_layer(g, &self.model.params, &cfg.embed, layer, own, neighbors, &mask)?;
        Ok(out.embedding)
    }
}

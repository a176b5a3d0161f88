//! Interaction traces and the per-node state of the dynamic bipartite graph.
//!
//! Users and items share one node index space: user `u` is node `u` and item
//! `i` is node `num_users + i`. Per-node state (message buffers, memory,
//! temporal neighbors) is indexed by that node id.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::EventError;

/// One timestamped user → item request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user: usize,
    pub item: usize,
    pub timestamp: f64,
    pub edge_features: Vec<f64>,
}

/// A chronologically ordered trace with densely indexed users and items.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<InteractionEvent>,
    pub num_users: usize,
    pub num_items: usize,
    pub edge_dim: usize,
    /// Static features per user; empty rows mean the dataset has none.
    pub user_features: Vec<Vec<f64>>,
    pub item_features: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub edge_feature_dim: usize,
    pub node_feature_dim: usize,
    pub time_start: f64,
    pub time_end: f64,
    /// Rows that had to be moved when sorting by timestamp.
    pub out_of_order_rows: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderMode {
    /// Treat the first line as a header when its timestamp column is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

/// Column layout: `user, item, timestamp, [label,] features...`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub header: HeaderMode,
    pub has_label: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            header: HeaderMode::Auto,
            has_label: true,
        }
    }
}

impl Trace {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn user_node(&self, user: usize) -> usize {
        user
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn node_feature_dim(&self) -> usize {
        self.user_features
            .first()
            .or(self.item_features.first())
            .map_or(0, Vec::len)
    }

    pub fn user_feature(&self, user: usize) -> &[f64] {
        self.user_features.get(user).map_or(&[], Vec::as_slice)
    }

    pub fn item_feature(&self, item: usize) -> &[f64] {
        self.item_features.get(item).map_or(&[], Vec::as_slice)
    }

    pub fn summary(&self, out_of_order_rows: usize) -> DatasetSummary {
        DatasetSummary {
            users: self.num_users,
            items: self.num_items,
            interactions: self.events.len(),
            edge_feature_dim: self.edge_dim,
            node_feature_dim: self.node_feature_dim(),
            time_start: self.events.first().map_or(0.0, |e| e.timestamp),
            time_end: self.events.last().map_or(0.0, |e| e.timestamp),
            out_of_order_rows,
        }
    }

    /// A copy restricted to `events[range]`, keeping the node universe.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trace {
        Trace {
            events: self.events[range].to_vec(),
            ..self.clone_without_events()
        }
    }

    pub fn clone_without_events(&self) -> Trace {
        Trace {
            events: Vec::new(),
            num_users: self.num_users,
            num_items: self.num_items,
            edge_dim: self.edge_dim,
            user_features: self.user_features.clone(),
            item_features: self.item_features.clone(),
        }
    }

    /// Writes the trace in the layout [`ingest_csv`] reads (with a header and
    /// a zero label column).
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["user_id".to_string(), "item_id".into(), "timestamp".into(), "state_label".into()];
        header.extend((0..self.edge_dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for e in &self.events {
            let mut rec = vec![e.user.to_string(), e.item.to_string(), e.timestamp.to_string(), "0".into()];
            rec.extend(e.edge_features.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Reads a JODIE-layout CSV file.
pub fn ingest_csv(path: &Path, schema: CsvSchema) -> Result<(Trace, DatasetSummary), EventError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| EventError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: CsvSchema) -> Result<(Trace, DatasetSummary), EventError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    struct Row {
        user: String,
        item: String,
        timestamp: f64,
        features: Vec<f64>,
    }
    let mut rows = Vec::new();
    let mut edge_dim = None;
    let feature_start = if schema.has_label { 4 } else { 3 };

    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| EventError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let is_header = match schema.header {
            HeaderMode::Present => idx == 0,
            HeaderMode::Absent => false,
            HeaderMode::Auto => idx == 0 && record.get(2).is_some_and(|t| t.parse::<f64>().is_err()),
        };
        if is_header {
            continue;
        }
        if record.len() < feature_start {
            return Err(EventError::Malformed {
                line,
                message: format!("expected at least {feature_start} columns, found {}", record.len()),
            });
        }
        let timestamp: f64 = record[2].parse().map_err(|_| EventError::Malformed {
            line,
            message: format!("timestamp `{}` is not a number", &record[2]),
        })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(EventError::Malformed {
                line,
                message: format!("timestamp {timestamp} must be finite and non-negative"),
            });
        }
        let features = record
            .iter()
            .skip(feature_start)
            .map(|f| {
                f.parse::<f64>().map_err(|_| EventError::Malformed {
                    line,
                    message: format!("feature `{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        match edge_dim {
            None => edge_dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(EventError::Malformed {
                    line,
                    message: format!("expected {d} edge features, found {}", features.len()),
                })
            }
            _ => {}
        }
        rows.push(Row {
            user: record[0].to_string(),
            item: record[1].to_string(),
            timestamp,
            features,
        });
    }

    let out_of_order = rows.windows(2).filter(|w| w[1].timestamp < w[0].timestamp).count();
    // Stable: ties keep file order.
    rows.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    if out_of_order > 0 {
        log::warn!("{out_of_order} rows were out of timestamp order and have been sorted");
    }

    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut events = Vec::with_capacity(rows.len());
    for row in rows {
        let next_user = users.len();
        let user = *users.entry(row.user).or_insert(next_user);
        let next_item = items.len();
        let item = *items.entry(row.item).or_insert(next_item);
        events.push(InteractionEvent {
            user,
            item,
            timestamp: row.timestamp,
            edge_features: row.features,
        });
    }
    let trace = Trace {
        events,
        num_users: users.len(),
        num_items: items.len(),
        edge_dim: edge_dim.unwrap_or(0),
        user_features: Vec::new(),
        item_features: Vec::new(),
    };
    let summary = trace.summary(out_of_order);
    Ok((trace, summary))
}

/// Index boundaries of a chronological train/validation/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
    /// Nodes that never appear in the training range.
    pub new_nodes: BTreeSet<usize>,
}

impl Split {
    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> std::ops::Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.val_end..self.len
    }

    pub fn is_new(&self, node: usize) -> bool {
        self.new_nodes.contains(&node)
    }
}

pub fn chronological_split(trace: &Trace, fractions: (f64, f64, f64)) -> Result<Split, EventError> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(EventError::BadFractions(fractions));
    }
    let n = trace.events.len();
    let train_end = ((n as f64) * a).round() as usize;
    let val_end = (((n as f64) * (a + b)).round() as usize).clamp(train_end, n);

    let mut seen = vec![false; trace.num_nodes()];
    for e in &trace.events[..train_end] {
        seen[trace.user_node(e.user)] = true;
        seen[trace.item_node(e.item)] = true;
    }
    let new_nodes = trace.events[train_end..]
        .iter()
        .flat_map(|e| [trace.user_node(e.user), trace.item_node(e.item)])
        .filter(|&n| !seen[n])
        .collect();
    Ok(Split {
        train_end,
        val_end,
        len: n,
        new_nodes,
    })
}

/// One stored interaction from a node's point of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMessage {
    pub features: Vec<f64>,
    pub birth: f64,
}

/// Result of [`MessageBuffer::recent`]: up to `n` messages newest first,
/// plus one flag per slot marking which slots hold a real message.
#[derive(Clone, Debug, PartialEq)]
pub struct RecentMessages<'a> {
    pub messages: Vec<&'a RawMessage>,
    pub mask: Vec<bool>,
}

/// Bounded per-node message history, newest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageBuffer {
    capacity: usize,
    slots: Vec<VecDeque<RawMessage>>,
}

impl MessageBuffer {
    pub fn new(num_nodes: usize, capacity: usize) -> Self {
        Self {
            capacity,
            slots: vec![VecDeque::new(); num_nodes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, node: usize, message: RawMessage) {
        if node >= self.slots.len() {
            self.slots.resize(node + 1, VecDeque::new());
        }
        let slot = &mut self.slots[node];
        // Keep newest-first even if a message arrives with an older stamp.
        let pos = slot.iter().position(|m| m.birth <= message.birth).unwrap_or(slot.len());
        slot.insert(pos, message);
        slot.truncate(self.capacity);
    }

    pub fn len(&self, node: usize) -> usize {
        self.slots.get(node).map_or(0, VecDeque::len)
    }

    pub fn entries(&self, node: usize) -> impl Iterator<Item = &RawMessage> {
        self.slots.get(node).into_iter().flatten()
    }

    /// Up to `n` newest messages born strictly before `t`.
    pub fn recent(&self, node: usize, t: f64, n: usize) -> Result<RecentMessages<'_>, EventError> {
        if n == 0 {
            return Err(EventError::ZeroCount);
        }
        let messages: Vec<&RawMessage> = self.entries(node).filter(|m| m.birth < t).take(n).collect();
        let mut mask = vec![false; n];
        mask[..messages.len()].fill(true);
        Ok(RecentMessages { messages, mask })
    }
}

/// Per-node memory vectors, zero-initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    last_update: Vec<f64>,
}

impl MemoryStore {
    pub fn new(num_nodes: usize, dim: usize) -> Self {
        Self {
            dim,
            vectors: vec![vec![0.0; dim]; num_nodes],
            last_update: vec![0.0; num_nodes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, node: usize) -> &[f64] {
        &self.vectors[node]
    }

    pub fn last_update(&self, node: usize) -> f64 {
        self.last_update[node]
    }

    pub fn set(&mut self, node: usize, value: Vec<f64>, time: f64) {
        debug_assert_eq!(value.len(), self.dim);
        self.vectors[node] = value;
        self.last_update[node] = time;
    }

    pub fn snapshot(&self) -> MemoryStore {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &MemoryStore) {
        self.clone_from(snapshot);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub node: usize,
    pub edge_features: Vec<f64>,
    pub timestamp: f64,
}

/// Per-node interaction history ordered by timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalNeighborIndex {
    lists: Vec<Vec<NeighborRecord>>,
}

impl TemporalNeighborIndex {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            lists: vec![Vec::new(); num_nodes],
        }
    }

    pub fn insert(&mut self, node: usize, record: NeighborRecord) {
        if node >= self.lists.len() {
            self.lists.resize(node + 1, Vec::new());
        }
        let list = &mut self.lists[node];
        let pos = list.partition_point(|r| r.timestamp <= record.timestamp);
        list.insert(pos, record);
    }

    /// Up to `n` most recent neighbors with timestamps strictly before `t`,
    /// newest first.
    pub fn before(&self, node: usize, t: f64, n: usize) -> Vec<&NeighborRecord> {
        let Some(list) = self.lists.get(node) else {
            return Vec::new();
        };
        let end = list.partition_point(|r| r.timestamp < t);
        list[..end].iter().rev().take(n).collect()
    }

    /// Timestamp of the latest interaction strictly before `t`.
    pub fn last_before(&self, node: usize, t: f64) -> Option<f64> {
        self.before(node, t, 1).first().map(|r| r.timestamp)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.lists.get(node).map_or(0, Vec::len)
    }
}

/// One uniformly drawn negative item per positive pair.
pub fn sample_negatives<R: Rng + ?Sized>(
    positives: &[(usize, usize)],
    num_items: usize,
    rng: &mut R,
) -> Result<Vec<usize>, EventError> {
    if num_items == 0 {
        return Err(EventError::NoItems);
    }
    Ok(positives.iter().map(|_| rng.random_range(0..num_items)).collect())
}

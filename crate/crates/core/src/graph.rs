//! Append-only, time-ordered bipartite event store: trace ingest with the
//! duration/request-count filters, temporal neighbor sampling, and the
//! chronological train/val/test split.

use crate::error::{Error, Result};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

/// Records shorter than this many seconds are dropped at ingest.
pub const MIN_DURATION_SECS: f64 = 180.0;
/// Users with at most this many surviving requests are dropped at ingest.
pub const MIN_REQUESTS_EXCLUSIVE: usize = 4;

/// A node of the bipartite graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    User(usize),
    Item(usize),
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::User(u) => write!(f, "u:{u}"),
            NodeId::Item(i) => write!(f, "i:{i}"),
        }
    }
}

/// One interaction quadruple of the dynamic graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub event_index: usize,
    pub user: usize,
    pub item: usize,
    /// Seconds since epoch.
    pub timestamp: f64,
    pub edge_features: Vec<f64>,
    /// Viewing duration from the raw trace; only used for filtering.
    pub duration: f64,
}

/// Raw per-line trace record before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub timestamp: f64,
    pub user: String,
    pub item: String,
    pub duration: f64,
    pub genres: Vec<String>,
}

/// Raw node features and genre lists for every id in the event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCatalog {
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
    pub user_features: Vec<Vec<f64>>,
    pub item_features: Vec<Vec<f64>>,
    pub item_genres: Vec<Vec<String>>,
    pub d_v: usize,
    pub d_e: usize,
}

impl NodeCatalog {
    pub fn n_users(&self) -> usize {
        self.user_names.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn user_feature(&self, u: usize) -> Array1<f64> {
        Array1::from_vec(self.user_features[u].clone())
    }

    pub fn item_feature(&self, i: usize) -> Array1<f64> {
        Array1::from_vec(self.item_features[i].clone())
    }
}

/// Kept/dropped counts from one ingest run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub input_records: usize,
    pub malformed: usize,
    pub dropped_short_duration: usize,
    pub dropped_rare_user: usize,
    pub kept_events: usize,
    pub n_users: usize,
    pub n_items: usize,
}

/// Immutable, time-ordered event store with a per-node temporal index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStore {
    pub events: Vec<InteractionEvent>,
    user_index: Vec<Vec<usize>>,
    item_index: Vec<Vec<usize>>,
}

impl EventStore {
    pub fn new(events: Vec<InteractionEvent>, n_users: usize, n_items: usize) -> Self {
        let mut user_index = vec![Vec::new(); n_users];
        let mut item_index = vec![Vec::new(); n_items];
        for ev in &events {
            user_index[ev.user].push(ev.event_index);
            item_index[ev.item].push(ev.event_index);
        }
        EventStore { events, user_index, item_index }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_index.len()
    }

    fn node_index(&self, node: NodeId) -> &[usize] {
        match node {
            NodeId::User(u) => self.user_index.get(u).map(|v| v.as_slice()).unwrap_or(&[]),
            NodeId::Item(i) => self.item_index.get(i).map(|v| v.as_slice()).unwrap_or(&[]),
        }
    }

    /// Up to `n_max` events incident to `node` strictly before `t`, most
    /// recent first; timestamp ties break toward the higher event index.
    pub fn sample_recent_neighbors(
        &self,
        node: NodeId,
        t: f64,
        n_max: usize,
    ) -> Vec<&InteractionEvent> {
        self.sample_recent_neighbors_bounded(node, t, n_max, usize::MAX)
    }

    /// As [`Self::sample_recent_neighbors`], additionally restricted to
    /// events with `event_index < cursor`. Training uses the cursor to hide
    /// in-flight batch events from embedding queries.
    pub fn sample_recent_neighbors_bounded(
        &self,
        node: NodeId,
        t: f64,
        n_max: usize,
        cursor: usize,
    ) -> Vec<&InteractionEvent> {
        let index = self.node_index(node);
        // Per-node indices ascend in both timestamp and event index, so both
        // constraints are prefix cuts.
        let cut_t = index.partition_point(|&e| self.events[e].timestamp < t);
        let cut_c = index.partition_point(|&e| e < cursor);
        let cut = cut_t.min(cut_c);
        let take = n_max.min(cut);
        index[cut - take..cut].iter().rev().map(|&e| &self.events[e]).collect()
    }
}

/// Contiguous 60/20/20 event ranges plus the nodes unseen during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChronoSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub new_users: BTreeSet<usize>,
    pub new_items: BTreeSet<usize>,
}

impl ChronoSplit {
    pub fn touches_new_node(&self, ev: &InteractionEvent) -> bool {
        self.new_users.contains(&ev.user) || self.new_items.contains(&ev.item)
    }
}

/// Splits a non-empty, time-ordered event stream at 60% and 80% of the
/// event count.
pub fn chronological_split(store: &EventStore) -> Result<ChronoSplit> {
    let n = store.len();
    if n < 5 {
        return Err(Error::Ingest(format!("cannot split a stream of {n} events")));
    }
    let a = (n as f64 * 0.6).floor() as usize;
    let b = (n as f64 * 0.8).floor() as usize;
    let mut seen_users = BTreeSet::new();
    let mut seen_items = BTreeSet::new();
    for ev in &store.events[..a] {
        seen_users.insert(ev.user);
        seen_items.insert(ev.item);
    }
    let mut new_users = BTreeSet::new();
    let mut new_items = BTreeSet::new();
    for ev in &store.events[a..] {
        if !seen_users.contains(&ev.user) {
            new_users.insert(ev.user);
        }
        if !seen_items.contains(&ev.item) {
            new_items.insert(ev.item);
        }
    }
    Ok(ChronoSplit { train: 0..a, val: a..b, test: b..n, new_users, new_items })
}

fn validate_record(rec: &RawRecord) -> std::result::Result<(), String> {
    if !rec.timestamp.is_finite() {
        return Err("non-finite timestamp".into());
    }
    if !rec.duration.is_finite() || rec.duration < 0.0 {
        return Err("bad duration".into());
    }
    if rec.user.is_empty() || rec.item.is_empty() {
        return Err("empty user or item id".into());
    }
    if rec.genres.is_empty() || rec.genres.iter().any(|g| g.is_empty()) {
        return Err("empty genre list".into());
    }
    Ok(())
}

/// Filters and densifies raw records into an event store and catalog.
///
/// Order of operations: malformed records are rejected per record, then the
/// duration filter (strictly more than three minutes) runs, then users with
/// four or fewer surviving requests are dropped. Survivors are sorted by
/// (timestamp, original record order), ids are assigned densely in first-
/// appearance order, and raw node features are drawn i.i.d. uniform in
/// [-0.1, 0.1] from the seeded generator.
pub fn ingest_records<I>(
    records: I,
    d_v: usize,
    d_e: usize,
    seed: u64,
) -> Result<(EventStore, NodeCatalog, IngestReport)>
where
    I: IntoIterator<Item = std::result::Result<RawRecord, String>>,
{
    let mut report = IngestReport::default();
    let mut valid: Vec<(usize, RawRecord)> = Vec::new();
    for (orig, rec) in records.into_iter().enumerate() {
        report.input_records += 1;
        match rec {
            Ok(r) => match validate_record(&r) {
                Ok(()) => valid.push((orig, r)),
                Err(why) => {
                    log::debug!("rejecting record {orig}: {why}");
                    report.malformed += 1;
                }
            },
            Err(why) => {
                log::debug!("rejecting record {orig}: {why}");
                report.malformed += 1;
            }
        }
    }

    let before = valid.len();
    valid.retain(|(_, r)| r.duration > MIN_DURATION_SECS);
    report.dropped_short_duration = before - valid.len();

    let mut per_user: HashMap<&str, usize> = HashMap::new();
    for (_, r) in &valid {
        *per_user.entry(r.user.as_str()).or_default() += 1;
    }
    let keep: BTreeSet<String> = per_user
        .iter()
        .filter(|(_, &c)| c > MIN_REQUESTS_EXCLUSIVE)
        .map(|(u, _)| u.to_string())
        .collect();
    let before = valid.len();
    valid.retain(|(_, r)| keep.contains(&r.user));
    report.dropped_rare_user = before - valid.len();

    if valid.is_empty() {
        return Err(Error::Ingest("no events survive the ingest filters".into()));
    }

    valid.sort_by(|(oa, ra), (ob, rb)| {
        ra.timestamp.total_cmp(&rb.timestamp).then(oa.cmp(ob))
    });

    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut user_names = Vec::new();
    let mut item_names = Vec::new();
    let mut item_genres: Vec<Vec<String>> = Vec::new();
    let mut events = Vec::with_capacity(valid.len());
    for (event_index, (_, r)) in valid.into_iter().enumerate() {
        let user = *user_ids.entry(r.user.clone()).or_insert_with(|| {
            user_names.push(r.user.clone());
            user_names.len() - 1
        });
        let item = *item_ids.entry(r.item.clone()).or_insert_with(|| {
            item_names.push(r.item.clone());
            item_genres.push(r.genres.clone());
            item_names.len() - 1
        });
        events.push(InteractionEvent {
            event_index,
            user,
            item,
            timestamp: r.timestamp,
            // The trace carries no behavior-type information; edge vectors
            // are zero placeholders of the configured width.
            edge_features: vec![0.0; d_e],
            duration: r.duration,
        });
    }

    report.kept_events = events.len();
    report.n_users = user_names.len();
    report.n_items = item_names.len();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d_v).map(|_| rng.random_range(-0.1..0.1)).collect()).collect()
    };
    let user_features = draw(user_names.len());
    let item_features = draw(item_names.len());

    let catalog = NodeCatalog {
        user_names,
        item_names,
        user_features,
        item_features,
        item_genres,
        d_v,
        d_e,
    };
    let store = EventStore::new(events, catalog.n_users(), catalog.n_items());
    Ok((store, catalog, report))
}

/// Parses one `timestamp,user,item,duration,genres` line; genres are
/// `|`-separated.
pub fn parse_trace_line(line: &str) -> std::result::Result<RawRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let timestamp: f64 =
        fields[0].trim().parse().map_err(|_| "unparseable timestamp".to_string())?;
    let duration: f64 =
        fields[3].trim().parse().map_err(|_| "unparseable duration".to_string())?;
    let genres: Vec<String> = fields[4]
        .split('|')
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect();
    Ok(RawRecord {
        timestamp,
        user: fields[1].trim().to_string(),
        item: fields[2].trim().to_string(),
        duration,
        genres,
    })
}

/// Reads a whole trace file into per-line parse results.
pub fn read_trace_file(path: &std::path::Path) -> Result<Vec<std::result::Result<RawRecord, String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_trace_line)
        .collect())
}

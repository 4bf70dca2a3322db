//! Temporal learning: semantics-enhanced historical messages, the three
//! message aggregators (latest / mean / AoI attention), and the recurrent
//! long-term memory update.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::graph::{InteractionEvent, NodeCatalog};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// One historical message: the raw interaction concatenation, optionally a
/// semantics-fused form, and the context needed to recompute the fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMessage {
    /// `[v_u || v_i || e || t]`, width `2*d_v + d_e + 1`.
    pub raw: Array1<f64>,
    /// `relu(W1 raw + W2 S_k)`; present iff semantics are enabled.
    pub fused: Option<Array1<f64>>,
    pub timestamp: f64,
    /// The interaction's item, which sources the semantic features.
    pub counterpart_item: usize,
    /// Last-round embeddings of the interacting (user, item) pair at message
    /// time; consumed by the user-specific attention aggregator.
    pub pair_snapshot: Option<(Array1<f64>, Array1<f64>)>,
}

impl TemporalMessage {
    /// The vector an aggregator consumes: fused when present, raw otherwise.
    pub fn payload(&self) -> &Array1<f64> {
        self.fused.as_ref().unwrap_or(&self.raw)
    }
}

/// Bounded per-node message deque, newest at the back.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageBuffer {
    msgs: VecDeque<TemporalMessage>,
    pub capacity: usize,
    /// Age cutoff in seconds for the AoI aggregator.
    pub max_age: f64,
}

impl MessageBuffer {
    pub fn new(capacity: usize, max_age: f64) -> Self {
        MessageBuffer { msgs: VecDeque::with_capacity(capacity), capacity, max_age }
    }

    pub fn push(&mut self, msg: TemporalMessage) {
        if self.msgs.len() == self.capacity {
            self.msgs.pop_front();
        }
        self.msgs.push_back(msg);
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TemporalMessage> {
        self.msgs.iter()
    }

    /// Messages strictly before `t_hat`, oldest first.
    pub fn before(&self, t_hat: f64) -> Vec<&TemporalMessage> {
        self.msgs.iter().filter(|m| m.timestamp < t_hat).collect()
    }

    /// The newest message strictly before `t_hat`.
    pub fn latest_before(&self, t_hat: f64) -> Option<&TemporalMessage> {
        self.msgs.iter().rev().find(|m| m.timestamp < t_hat)
    }

    /// AoI filter: messages strictly before `t_hat` with age at most
    /// `max_age`, keeping the most recent `capacity` survivors.
    pub fn fresh_before(&self, t_hat: f64) -> Vec<&TemporalMessage> {
        let mut survivors: Vec<&TemporalMessage> = self
            .msgs
            .iter()
            .filter(|m| m.timestamp < t_hat && t_hat - m.timestamp <= self.max_age)
            .collect();
        if survivors.len() > self.capacity {
            survivors.drain(..survivors.len() - self.capacity);
        }
        survivors
    }
}

/// A node's long-term preference vector and its update clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub mem: Array1<f64>,
    pub last_update: f64,
}

impl MemoryState {
    /// Memory at node birth: the zero vector.
    pub fn zero(d_m: usize) -> Self {
        MemoryState { mem: Array1::zeros(d_m), last_update: 0.0 }
    }
}

/// Gate weights of the recurrent memory updater.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_hz: Array2<f64>,
    pub w_mz: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_hh: Array2<f64>,
    pub w_mh: Array2<f64>,
    pub b_h: Array1<f64>,
    pub w_hf: Array2<f64>,
    pub w_mf: Array2<f64>,
    pub b_f: Array1<f64>,
}

/// Fusion weights turning a raw message and an aggregated semantic feature
/// into the enhanced message.
#[derive(Debug, Clone)]
pub struct MessageFusionParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

/// Attention weights of the AoI aggregator.
#[derive(Debug, Clone)]
pub struct AoiParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

fn col(v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

fn uncol(v: &Array2<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

/// Raw message concatenation `[v_u || v_i || e || t]` for one event.
pub fn raw_message(event: &InteractionEvent, catalog: &NodeCatalog) -> Array1<f64> {
    let vu = &catalog.user_features[event.user];
    let vi = &catalog.item_features[event.item];
    let mut out = Vec::with_capacity(vu.len() + vi.len() + event.edge_features.len() + 1);
    out.extend_from_slice(vu);
    out.extend_from_slice(vi);
    out.extend_from_slice(&event.edge_features);
    out.push(event.timestamp);
    Array1::from_vec(out)
}

/// Tape form of the semantic message fusion `relu(W1 raw + W2 s_k)`.
pub fn tape_fuse_message(
    tape: &mut Tape,
    w1: VarId,
    w2: VarId,
    raw: VarId,
    s_k: VarId,
) -> VarId {
    let a = tape.matmul(w1, raw);
    let b = tape.matmul(w2, s_k);
    let s = tape.add(a, b);
    tape.relu(s)
}

/// Builds the message for an event. With fusion parameters present the
/// aggregated semantic feature is mandatory; without them the message stays
/// on the raw path (the plain-TGN ablation).
pub fn build_message(
    event: &InteractionEvent,
    catalog: &NodeCatalog,
    s_k: Option<&Array1<f64>>,
    fusion: Option<&MessageFusionParams>,
    pair_snapshot: Option<(Array1<f64>, Array1<f64>)>,
) -> Result<TemporalMessage> {
    let raw = raw_message(event, catalog);
    let fused = match fusion {
        None => None,
        Some(f) => {
            let s_k = s_k.ok_or_else(|| {
                Error::Train("semantics enabled but no aggregated feature supplied".into())
            })?;
            if f.w1.ncols() != raw.len() || f.w2.ncols() != s_k.len() {
                return Err(Error::Shape("message fusion width mismatch".into()));
            }
            let mut tape = Tape::new();
            let w1 = tape.leaf(f.w1.clone());
            let w2 = tape.leaf(f.w2.clone());
            let rawv = tape.leaf(col(&raw));
            let sv = tape.leaf(col(s_k));
            let out = tape_fuse_message(&mut tape, w1, w2, rawv, sv);
            Some(uncol(tape.value(out)))
        }
    };
    Ok(TemporalMessage {
        raw,
        fused,
        timestamp: event.timestamp,
        counterpart_item: event.item,
        pair_snapshot,
    })
}

/// Latest-message aggregator. `None` signals "no update".
pub fn aggregate_last(buffer: &MessageBuffer, t_hat: f64) -> Option<Array1<f64>> {
    buffer.latest_before(t_hat).map(|m| m.payload().clone())
}

/// Mean aggregator over all buffered messages strictly before `t_hat`.
pub fn aggregate_mean(buffer: &MessageBuffer, t_hat: f64) -> Option<Array1<f64>> {
    let msgs = buffer.before(t_hat);
    if msgs.is_empty() {
        return None;
    }
    let mut acc = Array1::zeros(msgs[0].payload().len());
    for m in &msgs {
        acc += m.payload();
    }
    Some(acc / msgs.len() as f64)
}

/// Tape form of the AoI attention over pre-selected fresh messages:
/// scores `<W_q mem, W_k msg>`, output `sum softmax * (W_v msg)`.
pub fn tape_aoi_attend(
    tape: &mut Tape,
    w_q: VarId,
    w_k: VarId,
    w_v: VarId,
    mem: VarId,
    msgs: &[VarId],
) -> (VarId, VarId) {
    assert!(!msgs.is_empty());
    let q = tape.matmul(w_q, mem);
    let mut logits = Vec::with_capacity(msgs.len());
    let mut values = Vec::with_capacity(msgs.len());
    for &m in msgs {
        let k = tape.matmul(w_k, m);
        logits.push(tape.dot(q, k));
        values.push(tape.matmul(w_v, m));
    }
    let logits = tape.concat(&logits);
    let alphas = tape.softmax(logits);
    let mut acc: Option<VarId> = None;
    for (n, v) in values.into_iter().enumerate() {
        let a_n = tape.slice_rows(alphas, n, 1);
        let term = tape.matmul(v, a_n);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    (acc.expect("non-empty"), alphas)
}

/// AoI aggregator: attention over fresh messages, scored against the
/// current memory. `None` when every message is stale.
pub fn aggregate_aoi(
    buffer: &MessageBuffer,
    t_hat: f64,
    mem: &MemoryState,
    params: &AoiParams,
) -> Option<Array1<f64>> {
    let survivors = buffer.fresh_before(t_hat);
    if survivors.is_empty() {
        return None;
    }
    let mut tape = Tape::new();
    let w_q = tape.leaf(params.w_q.clone());
    let w_k = tape.leaf(params.w_k.clone());
    let w_v = tape.leaf(params.w_v.clone());
    let memv = tape.leaf(col(&mem.mem));
    let msgs: Vec<VarId> = survivors.iter().map(|m| tape.leaf(col(m.payload()))).collect();
    let (h, _) = tape_aoi_attend(&mut tape, w_q, w_k, w_v, memv, &msgs);
    Some(uncol(tape.value(h)))
}

/// Tape form of the gated memory update:
/// `F = sigmoid(W_hf h + W_mf m + b_f)`,
/// `H = tanh(W_hh h + W_mh (F*m) + b_h)`,
/// `Z = sigmoid(W_hz h + W_mz m + b_z)`,
/// `m' = Z*H + (1-Z)*m`.
pub fn tape_gru_update(
    tape: &mut Tape,
    p: &GruVarIds,
    h: VarId,
    mem: VarId,
) -> VarId {
    let gate = |tape: &mut Tape, w_h: VarId, w_m: VarId, b: VarId, m_in: VarId| {
        let a = tape.matmul(w_h, h);
        let c = tape.matmul(w_m, m_in);
        let s = tape.add(a, c);
        tape.add(s, b)
    };
    let f_pre = gate(tape, p.w_hf, p.w_mf, p.b_f, mem);
    let f = tape.sigmoid(f_pre);
    let fm = tape.mul(f, mem);
    let h_pre = gate(tape, p.w_hh, p.w_mh, p.b_h, fm);
    let cand = tape.tanh(h_pre);
    let z_pre = gate(tape, p.w_hz, p.w_mz, p.b_z, mem);
    let z = tape.sigmoid(z_pre);
    let zh = tape.mul(z, cand);
    let ones = tape.leaf(Array2::from_elem(tape.value(z).dim(), 1.0));
    let one_minus_z = tape.sub(ones, z);
    let keep = tape.mul(one_minus_z, mem);
    tape.add(zh, keep)
}

/// Tape handles for the recurrent updater's tensors.
#[derive(Debug, Clone, Copy)]
pub struct GruVarIds {
    pub w_hz: VarId,
    pub w_mz: VarId,
    pub b_z: VarId,
    pub w_hh: VarId,
    pub w_mh: VarId,
    pub b_h: VarId,
    pub w_hf: VarId,
    pub w_mf: VarId,
    pub b_f: VarId,
}

/// Applies one gated update to a memory state. Non-finite outputs are a
/// hard error (they signal training divergence).
pub fn update_memory(
    state: &MemoryState,
    h: &Array1<f64>,
    t_hat: f64,
    params: &GruParams,
) -> Result<MemoryState> {
    if params.w_hz.ncols() != h.len() || params.w_mz.ncols() != state.mem.len() {
        return Err(Error::Shape("memory update width mismatch".into()));
    }
    let mut tape = Tape::new();
    let ids = GruVarIds {
        w_hz: tape.leaf(params.w_hz.clone()),
        w_mz: tape.leaf(params.w_mz.clone()),
        b_z: tape.leaf(col(&params.b_z)),
        w_hh: tape.leaf(params.w_hh.clone()),
        w_mh: tape.leaf(params.w_mh.clone()),
        b_h: tape.leaf(col(&params.b_h)),
        w_hf: tape.leaf(params.w_hf.clone()),
        w_mf: tape.leaf(params.w_mf.clone()),
        b_f: tape.leaf(col(&params.b_f)),
    };
    let hv = tape.leaf(col(h));
    let mv = tape.leaf(col(&state.mem));
    let out = tape_gru_update(&mut tape, &ids, hv, mv);
    let mem = uncol(tape.value(out));
    if mem.iter().any(|x| !x.is_finite()) {
        return Err(Error::Train("memory update produced non-finite values".into()));
    }
    Ok(MemoryState { mem, last_update: t_hat })
}

/// Versioned JSON dump of per-node memories for checkpoint/restore.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub version: u32,
    pub d_m: usize,
    pub entries: Vec<MemorySnapshotEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemorySnapshotEntry {
    pub node: String,
    pub mem: Vec<f64>,
    pub last_update: f64,
}

pub const MEMORY_SNAPSHOT_VERSION: u32 = 1;

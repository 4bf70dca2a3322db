//! Model state and the batched forward pass.
//!
//! Persistent state holds, per node, the long-term memory, the bounded
//! message buffer and the last computed embedding. Message absorption into
//! memory is deferred: a batch's messages enter the buffers after the
//! optimizer step, and the next forward that reads the node runs the
//! aggregate-and-update step on the tape. Gradients therefore flow through
//! exactly one memory update per read, and a batch's own messages never
//! influence its own predictions.

use crate::autodiff::{Tape, VarId};
use crate::config::{Aggregator, SemanticsMode, StructureMode};
use crate::error::{Error, Result};
use crate::graph::{EventStore, NodeId};
use crate::params::{ModelParams, ParamId};
use crate::semantics::SemanticSet;
use crate::structural::{SpeVarIds, TgatLayerVarIds};
use crate::temporal::{
    tape_aoi_attend, tape_fuse_message, tape_gru_update, GruVarIds, MemoryState, MessageBuffer,
    MemorySnapshot, MemorySnapshotEntry, TemporalMessage, MEMORY_SNAPSHOT_VERSION,
};
use ndarray::{Array1, Array2};
use std::collections::HashMap;

/// Mutable per-node state owned by the training/evaluation loop.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub memory: MemoryState,
    pub buffer: MessageBuffer,
    /// Messages with timestamps below this are reflected in `memory`.
    pub absorbed_upto: f64,
    /// Embedding from this node's most recent prediction.
    pub last_embedding: Option<Array1<f64>>,
}

impl NodeState {
    fn new(d_m: usize, capacity: usize, max_age: f64) -> Self {
        NodeState {
            memory: MemoryState::zero(d_m),
            buffer: MessageBuffer::new(capacity, max_age),
            absorbed_upto: f64::NEG_INFINITY,
            last_embedding: None,
        }
    }

    /// True when buffered messages in `[absorbed_upto, t_hat)` exist.
    pub fn has_pending(&self, t_hat: f64) -> bool {
        self.buffer
            .iter()
            .any(|m| m.timestamp >= self.absorbed_upto && m.timestamp < t_hat)
    }
}

/// All node states of one run.
#[derive(Debug, Clone)]
pub struct NodeStates {
    users: Vec<NodeState>,
    items: Vec<NodeState>,
    d_m: usize,
    capacity: usize,
    max_age: f64,
}

impl NodeStates {
    pub fn new(n_users: usize, n_items: usize, d_m: usize, capacity: usize, max_age: f64) -> Self {
        NodeStates {
            users: (0..n_users).map(|_| NodeState::new(d_m, capacity, max_age)).collect(),
            items: (0..n_items).map(|_| NodeState::new(d_m, capacity, max_age)).collect(),
            d_m,
            capacity,
            max_age,
        }
    }

    pub fn get(&self, node: NodeId) -> &NodeState {
        match node {
            NodeId::User(u) => &self.users[u],
            NodeId::Item(i) => &self.items[i],
        }
    }

    pub fn get_mut(&mut self, node: NodeId) -> &mut NodeState {
        match node {
            NodeId::User(u) => &mut self.users[u],
            NodeId::Item(i) => &mut self.items[i],
        }
    }

    /// Back to node-birth state: zero memories, empty buffers.
    pub fn reset(&mut self) {
        for s in self.users.iter_mut().chain(self.items.iter_mut()) {
            *s = NodeState::new(self.d_m, self.capacity, self.max_age);
        }
    }

    /// Pushes a message to both endpoints' buffers.
    pub fn push_message(&mut self, user: usize, item: usize, msg: TemporalMessage) {
        self.get_mut(NodeId::User(user)).buffer.push(msg.clone());
        self.get_mut(NodeId::Item(item)).buffer.push(msg);
    }

    pub fn memory_snapshot(&self) -> MemorySnapshot {
        let mut entries = Vec::new();
        for (u, s) in self.users.iter().enumerate() {
            entries.push(MemorySnapshotEntry {
                node: NodeId::User(u).to_string(),
                mem: s.memory.mem.to_vec(),
                last_update: s.memory.last_update,
            });
        }
        for (i, s) in self.items.iter().enumerate() {
            entries.push(MemorySnapshotEntry {
                node: NodeId::Item(i).to_string(),
                mem: s.memory.mem.to_vec(),
                last_update: s.memory.last_update,
            });
        }
        MemorySnapshot { version: MEMORY_SNAPSHOT_VERSION, d_m: self.d_m, entries }
    }
}

/// A memory value computed on the tape that should be persisted after the
/// batch completes.
#[derive(Debug, Clone, Copy)]
pub struct AbsorbRecord {
    pub node: NodeId,
    pub mem_var: VarId,
    /// New memory clock; `None` when every message was stale (no update).
    pub last_update: Option<f64>,
}

fn col(v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

pub fn uncol(v: &Array2<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

/// One batch's forward pass over a tape.
pub struct BatchForward<'a> {
    pub tape: Tape,
    pub model: &'a ModelParams,
    pvars: Vec<VarId>,
    store: &'a EventStore,
    sem_sets: Option<&'a [SemanticSet]>,
    states: &'a NodeStates,
    /// Events with indices at or above this are invisible to neighbor
    /// queries (the in-flight batch).
    cursor: usize,
    /// Absorption instant: pending messages strictly before this are folded
    /// into memories on the tape.
    absorb_t: f64,
    mem_cache: HashMap<NodeId, VarId>,
    rep0_cache: HashMap<NodeId, VarId>,
    sem_sum_cache: HashMap<usize, VarId>,
    struct_sem_cache: HashMap<NodeId, VarId>,
    zero_sem_block: Option<VarId>,
    pub absorb_records: Vec<AbsorbRecord>,
    /// Softmax nodes from every attention this forward created.
    pub attention_probes: Vec<VarId>,
}

impl<'a> BatchForward<'a> {
    pub fn new(
        model: &'a ModelParams,
        store: &'a EventStore,
        sem_sets: Option<&'a [SemanticSet]>,
        states: &'a NodeStates,
        cursor: usize,
        absorb_t: f64,
    ) -> Result<Self> {
        if model.cfg.semantics != SemanticsMode::Off && sem_sets.is_none() {
            return Err(Error::Train("semantic variant without encoded genres".into()));
        }
        let mut tape = Tape::new();
        let pvars = model.insert_into_tape(&mut tape);
        Ok(BatchForward {
            tape,
            model,
            pvars,
            store,
            sem_sets,
            states,
            cursor,
            absorb_t,
            mem_cache: HashMap::new(),
            rep0_cache: HashMap::new(),
            sem_sum_cache: HashMap::new(),
            struct_sem_cache: HashMap::new(),
            zero_sem_block: None,
            absorb_records: Vec::new(),
            attention_probes: Vec::new(),
        })
    }

    pub fn p(&self, id: ParamId) -> VarId {
        self.pvars[id.index()]
    }

    fn gru_ids(&self) -> GruVarIds {
        let g = &self.model.handles.gru;
        GruVarIds {
            w_hz: self.p(g.w_hz),
            w_mz: self.p(g.w_mz),
            b_z: self.p(g.b_z),
            w_hh: self.p(g.w_hh),
            w_mh: self.p(g.w_mh),
            b_h: self.p(g.b_h),
            w_hf: self.p(g.w_hf),
            w_mf: self.p(g.w_mf),
            b_f: self.p(g.b_f),
        }
    }

    /// The summation-aggregated semantic feature of an item, on the tape.
    fn sum_semantic(&mut self, item: usize) -> VarId {
        if let Some(&v) = self.sem_sum_cache.get(&item) {
            return v;
        }
        let ids = self.model.handles.sum_sem.expect("sum aggregator allocated");
        let (w_s, b_s) = (self.p(ids.w_s), self.p(ids.b_s));
        let set = &self.sem_sets.expect("semantic sets present")[item];
        let v = crate::semantics::tape_sum_aggregate(&mut self.tape, w_s, b_s, set);
        self.sem_sum_cache.insert(item, v);
        v
    }

    /// The vector the memory updater consumes for one stored message.
    fn msg_payload(&mut self, msg: &TemporalMessage) -> VarId {
        let raw = self.tape.leaf(col(&msg.raw));
        match self.model.cfg.semantics {
            SemanticsMode::Off => raw,
            SemanticsMode::Sum => {
                let s_k = self.sum_semantic(msg.counterpart_item);
                let f = self.model.handles.fusion.expect("fusion allocated");
                let (w1, w2) = (self.p(f.w1), self.p(f.w2));
                tape_fuse_message(&mut self.tape, w1, w2, raw, s_k)
            }
            SemanticsMode::UsAttn => {
                let u = self.model.handles.usattn.expect("usattn allocated");
                let (w_u, w_i, b_ui) = (self.p(u.w_u), self.p(u.w_i), self.p(u.b_ui));
                let (w_q, w_k, w_v) = (self.p(u.w_q), self.p(u.w_k), self.p(u.w_v));
                let d_emb = self.model.cfg.d_emb;
                let (snap_u, snap_i) = match &msg.pair_snapshot {
                    Some((a, b)) => (col(a), col(b)),
                    None => (Array2::zeros((d_emb, 1)), Array2::zeros((d_emb, 1))),
                };
                let eu = self.tape.leaf(snap_u);
                let ei = self.tape.leaf(snap_i);
                let e_jk = crate::semantics::tape_user_specific_embedding(
                    &mut self.tape,
                    w_u,
                    w_i,
                    b_ui,
                    eu,
                    ei,
                );
                let set = &self.sem_sets.expect("semantic sets present")[msg.counterpart_item];
                let (s_jk, alphas) =
                    crate::semantics::tape_usattn(&mut self.tape, w_q, w_k, w_v, e_jk, set);
                self.attention_probes.push(alphas);
                let s_k = crate::semantics::tape_skip_connect(
                    &mut self.tape,
                    s_jk,
                    e_jk,
                    set.n_genres(),
                );
                let f = self.model.handles.fusion.expect("fusion allocated");
                let (w1, w2) = (self.p(f.w1), self.p(f.w2));
                tape_fuse_message(&mut self.tape, w1, w2, raw, s_k)
            }
        }
    }

    /// Memory of a node as of the absorption instant: the stored value,
    /// with pending messages folded in on the tape.
    pub fn effective_memory(&mut self, node: NodeId) -> VarId {
        if let Some(&v) = self.mem_cache.get(&node) {
            return v;
        }
        let state = self.states.get(node);
        let mem_leaf = self.tape.leaf(col(&state.memory.mem));
        if !state.has_pending(self.absorb_t) {
            self.mem_cache.insert(node, mem_leaf);
            return mem_leaf;
        }

        let h = match self.model.cfg.aggregator {
            Aggregator::Last => {
                let msg = state
                    .buffer
                    .latest_before(self.absorb_t)
                    .expect("pending implies a message before the absorption instant")
                    .clone();
                Some(self.msg_payload(&msg))
            }
            Aggregator::Mean => {
                let msgs: Vec<TemporalMessage> =
                    state.buffer.before(self.absorb_t).into_iter().cloned().collect();
                let vars: Vec<VarId> = msgs.iter().map(|m| self.msg_payload(m)).collect();
                let mut acc = vars[0];
                for &v in &vars[1..] {
                    acc = self.tape.add(acc, v);
                }
                Some(self.tape.scale(acc, 1.0 / vars.len() as f64))
            }
            Aggregator::Aoi => {
                let msgs: Vec<TemporalMessage> =
                    state.buffer.fresh_before(self.absorb_t).into_iter().cloned().collect();
                if msgs.is_empty() {
                    None
                } else {
                    let a = self.model.handles.aoi.expect("aoi allocated");
                    let vars: Vec<VarId> = msgs.iter().map(|m| self.msg_payload(m)).collect();
                    let (w_q, w_k, w_v) = (self.p(a.w_q), self.p(a.w_k), self.p(a.w_v));
                    let (h, alphas) =
                        tape_aoi_attend(&mut self.tape, w_q, w_k, w_v, mem_leaf, &vars);
                    self.attention_probes.push(alphas);
                    Some(h)
                }
            }
        };

        let (out, last_update) = match h {
            None => (mem_leaf, None),
            Some(h) => {
                let gru = self.gru_ids();
                let updated = tape_gru_update(&mut self.tape, &gru, h, mem_leaf);
                (updated, Some(self.absorb_t))
            }
        };
        self.absorb_records.push(AbsorbRecord { node, mem_var: out, last_update });
        self.mem_cache.insert(node, out);
        out
    }

    /// Structural semantic block: the aggregated (and optionally
    /// position-encoded) genre feature for items, a zero block for users.
    fn structural_sem_block(&mut self, node: NodeId) -> Option<VarId> {
        let width = self.model.cfg.structural_sem_dim();
        if width == 0 {
            return None;
        }
        if let Some(&v) = self.struct_sem_cache.get(&node) {
            return Some(v);
        }
        let v = match node {
            NodeId::User(_) => *self
                .zero_sem_block
                .get_or_insert_with(|| self.tape.leaf(Array2::zeros((width, 1)))),
            NodeId::Item(item) => {
                let s = self.sum_semantic(item);
                match self.model.cfg.structure_semantics {
                    StructureMode::Sum => s,
                    StructureMode::SumSpe => {
                        let ids = self.model.handles.spe.expect("spe allocated");
                        let ids = SpeVarIds {
                            phi1_w1: self.p(ids.phi1_w1),
                            phi1_b1: self.p(ids.phi1_b1),
                            phi1_w2: self.p(ids.phi1_w2),
                            phi1_b2: self.p(ids.phi1_b2),
                            w_p: self.p(ids.w_p),
                            w1_p: self.p(ids.w1_p),
                            w2_p: self.p(ids.w2_p),
                        };
                        let (out, _) = crate::structural::tape_spe(&mut self.tape, &ids, s);
                        out
                    }
                    StructureMode::Off => unreachable!("width 0 handled above"),
                }
            }
        };
        self.struct_sem_cache.insert(node, v);
        Some(v)
    }

    /// Layer-zero representation: `[memory || semantic block]`.
    fn rep0(&mut self, node: NodeId) -> VarId {
        if let Some(&v) = self.rep0_cache.get(&node) {
            return v;
        }
        let mem = self.effective_memory(node);
        let v = match self.structural_sem_block(node) {
            None => mem,
            Some(s) => self.tape.concat(&[mem, s]),
        };
        self.rep0_cache.insert(node, v);
        v
    }

    fn time_code(&mut self, dt: f64) -> VarId {
        let omegas = self.p(self.model.handles.time_omegas);
        crate::structural::tape_encode_time(&mut self.tape, omegas, dt)
    }

    /// Recursive graph-attention embedding of `node` as of `t`.
    pub fn embed(&mut self, node: NodeId, t: f64, depth: usize) -> VarId {
        assert!(depth >= 1);
        let center_rep =
            if depth == 1 { self.rep0(node) } else { self.embed(node, t, depth - 1) };
        let phi0 = self.time_code(0.0);
        let center_in = self.tape.concat(&[center_rep, phi0]);

        let events: Vec<(NodeId, f64)> = self
            .store
            .sample_recent_neighbors_bounded(node, t, self.model.cfg.n_neighbors, self.cursor)
            .iter()
            .map(|ev| {
                let other = match node {
                    NodeId::User(_) => NodeId::Item(ev.item),
                    NodeId::Item(_) => NodeId::User(ev.user),
                };
                (other, ev.timestamp)
            })
            .collect();

        let mut neighbor_ins = Vec::with_capacity(events.len());
        for (other, t_e) in events {
            let rep = if depth == 1 { self.rep0(other) } else { self.embed(other, t_e, depth - 1) };
            let phi = self.time_code(t - t_e);
            neighbor_ins.push(self.tape.concat(&[rep, phi]));
        }

        let l = self.model.handles.tgat[depth - 1];
        let ids = TgatLayerVarIds {
            w_q: self.p(l.w_q),
            w_k: self.p(l.w_k),
            w_v: self.p(l.w_v),
            ff_w1: self.p(l.ff_w1),
            ff_b1: self.p(l.ff_b1),
            ff_w2: self.p(l.ff_w2),
            ff_b2: self.p(l.ff_b2),
        };
        let n_heads = self.model.cfg.n_heads;
        let mut probes = Vec::new();
        let out = crate::structural::tape_tgat_layer(
            &mut self.tape,
            &ids,
            n_heads,
            center_in,
            &neighbor_ins,
            &mut probes,
        );
        self.attention_probes.extend(probes);
        out
    }

    /// Decoder: two-layer feed-forward over `[e_u || e_i]` squashed to a
    /// probability.
    pub fn decode(&mut self, e_u: VarId, e_i: VarId) -> VarId {
        let d = &self.model.handles.decoder;
        let joint = self.tape.concat(&[e_u, e_i]);
        let hidden = self.tape.matmul(self.p(d.w1), joint);
        let hidden = self.tape.add(hidden, self.p(d.b1));
        let hidden = self.tape.relu(hidden);
        let z = self.tape.matmul(self.p(d.w2), hidden);
        let z = self.tape.add(z, self.p(d.b2));
        self.tape.sigmoid(z)
    }

    /// Predicted preference of a user for an item at `t`, plus both
    /// embeddings.
    pub fn predict(&mut self, user: usize, item: usize, t: f64) -> (VarId, VarId, VarId) {
        let depth = self.model.cfg.layers;
        let e_u = self.embed(NodeId::User(user), t, depth);
        let e_i = self.embed(NodeId::Item(item), t, depth);
        let p = self.decode(e_u, e_i);
        (p, e_u, e_i)
    }

    /// Owned copies of every memory this forward absorbed, for persisting
    /// after the forward's borrows end.
    pub fn absorbed_memories(&self) -> Vec<AbsorbedMemory> {
        self.absorb_records
            .iter()
            .map(|rec| AbsorbedMemory {
                node: rec.node,
                mem: uncol(self.tape.value(rec.mem_var)),
                last_update: rec.last_update,
            })
            .collect()
    }
}

/// A memory value ready to persist into [`NodeStates`].
#[derive(Debug, Clone)]
pub struct AbsorbedMemory {
    pub node: NodeId,
    pub mem: Array1<f64>,
    pub last_update: Option<f64>,
}

/// Writes absorbed memories back and advances the absorption watermark.
pub fn apply_absorptions(states: &mut NodeStates, absorbed: &[AbsorbedMemory], absorb_t: f64) {
    for rec in absorbed {
        let s = states.get_mut(rec.node);
        s.memory.mem = rec.mem.clone();
        if let Some(t) = rec.last_update {
            s.memory.last_update = t;
        }
        s.absorbed_upto = absorb_t;
    }
}


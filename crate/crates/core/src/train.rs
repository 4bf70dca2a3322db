//! Training and gradient verification: the preference decoder, the binary
//! cross-entropy objective, negative sampling, the batched training loop,
//! and a central finite-difference gradient check.

use crate::config::{SemanticsMode, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{EventStore, InteractionEvent, NodeCatalog, NodeId};
use crate::model::{apply_absorptions, AbsorbedMemory, BatchForward, NodeStates};
use crate::params::{Checkpoint, ModelParams};
use crate::semantics::SemanticSet;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

const NEGATIVE_RNG_SALT: u64 = 0x5eed_0001;

/// Plain view of the preference decoder.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: f64,
}

impl ModelParams {
    pub fn decoder_params(&self) -> DecoderParams {
        let d = &self.handles.decoder;
        DecoderParams {
            w1: self.value(d.w1).clone(),
            b1: Array1::from_iter(self.value(d.b1).iter().copied()),
            w2: self.value(d.w2).clone(),
            b2: self.value(d.b2)[[0, 0]],
        }
    }
}

/// Predicted preference: two-layer feed-forward over `[e_u || e_i]`
/// squashed through a logistic.
pub fn predict_preference(
    e_u: &Array1<f64>,
    e_i: &Array1<f64>,
    decoder: &DecoderParams,
) -> Result<f64> {
    if decoder.w1.ncols() != e_u.len() + e_i.len() {
        return Err(Error::Shape("decoder input width mismatch".into()));
    }
    let mut joint = Array1::zeros(e_u.len() + e_i.len());
    for (k, v) in e_u.iter().chain(e_i.iter()).enumerate() {
        joint[k] = *v;
    }
    let hidden = (decoder.w1.dot(&joint) + &decoder.b1).mapv(|x| x.max(0.0));
    let z = decoder.w2.dot(&hidden)[0] + decoder.b2;
    Ok(sigmoid(z))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-(p log p~ + (1-p) log(1-p~))`. The prediction must lie strictly in
/// (0, 1); anything else is a decoder contract violation.
pub fn bce_loss(label: bool, predicted: f64) -> Result<f64> {
    if !(predicted > 0.0 && predicted < 1.0) {
        return Err(Error::Train(format!(
            "prediction {predicted} outside (0, 1)"
        )));
    }
    Ok(if label { -predicted.ln() } else { -(1.0 - predicted).ln() })
}

/// Uniform negative draw over `items`; a collision with the positive is
/// redrawn once and then accepted regardless (bounded, documented bias).
pub fn sample_negative<R: Rng>(items: &[usize], positive: usize, rng: &mut R) -> Result<usize> {
    if items.len() < 2 {
        return Err(Error::Train("negative sampling needs at least two items".into()));
    }
    let first = items[rng.random_range(0..items.len())];
    if first != positive {
        return Ok(first);
    }
    Ok(items[rng.random_range(0..items.len())])
}

/// Adaptive-moment gradient descent state.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect(),
            v: params.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in params.ids().enumerate().map(|(k, id)| (k, id)) {
            let g = &grads[k];
            self.m[k] = &self.m[k] * self.beta1 + g * (1.0 - self.beta1);
            self.v[k] = &self.v[k] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let m_hat = &self.m[k] / bc1;
            let v_hat = &self.v[k] / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * self.learning_rate;
            *params.value_mut(id) -= &update;
        }
    }
}

/// Everything the training loop extracts from one batch forward.
pub struct BatchOutputs {
    pub loss: f64,
    pub grads: Option<Vec<Array2<f64>>>,
    pub absorbed: Vec<AbsorbedMemory>,
    /// Positive-pair embeddings in event order: (user, item, e_u, e_i).
    pub pos_embeddings: Vec<(usize, usize, Array1<f64>, Array1<f64>)>,
    pub min_kink_gap: f64,
    /// Attention simplex sums observed during the forward.
    pub attention_sums: Vec<f64>,
}

/// Forward (and optionally backward) over one batch: summed binary
/// cross-entropy over positive pairs and their sampled negatives, computed
/// on memories as of the batch start.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    params: &ModelParams,
    store: &EventStore,
    sem_sets: Option<&[SemanticSet]>,
    states: &NodeStates,
    events: &[InteractionEvent],
    negatives: &[Vec<usize>],
    cursor: usize,
    absorb_t: f64,
    compute_grads: bool,
) -> Result<BatchOutputs> {
    assert_eq!(events.len(), negatives.len());
    let mut bf = BatchForward::new(params, store, sem_sets, states, cursor, absorb_t)?;

    let one = bf.tape.leaf_scalar(1.0);
    let mut loss_terms = Vec::with_capacity(events.len() * 2);
    let mut pos_vars = Vec::with_capacity(events.len());
    for (ev, negs) in events.iter().zip(negatives) {
        let (p_pos, e_u, e_i) = bf.predict(ev.user, ev.item, ev.timestamp);
        let lp = bf.tape.ln(p_pos);
        loss_terms.push(bf.tape.scale(lp, -1.0));
        pos_vars.push((ev.user, ev.item, e_u, e_i));
        for &neg in negs {
            let (p_neg, _, _) = bf.predict(ev.user, neg, ev.timestamp);
            let q = bf.tape.sub(one, p_neg);
            let lq = bf.tape.ln(q);
            loss_terms.push(bf.tape.scale(lq, -1.0));
        }
    }
    let mut loss = loss_terms[0];
    for &t in &loss_terms[1..] {
        loss = bf.tape.add(loss, t);
    }

    let loss_value = bf.tape.scalar(loss);
    let grads = if compute_grads {
        let g = bf.tape.backward(loss);
        Some(
            params
                .ids()
                .map(|id| g.get(bf.p(id), params.value(id)))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let pos_embeddings = pos_vars
        .into_iter()
        .map(|(u, i, e_u, e_i)| {
            (
                u,
                i,
                crate::model::uncol(bf.tape.value(e_u)),
                crate::model::uncol(bf.tape.value(e_i)),
            )
        })
        .collect();
    let attention_sums =
        bf.attention_probes.iter().map(|&p| bf.tape.value(p).sum()).collect();
    Ok(BatchOutputs {
        loss: loss_value,
        grads,
        absorbed: bf.absorbed_memories(),
        pos_embeddings,
        min_kink_gap: bf.tape.min_kink_gap(),
        attention_sums,
    })
}

/// Plain (off-tape) aggregated semantic feature for a message, mirroring
/// the on-tape fusion path.
fn plain_semantic_feature(
    params: &ModelParams,
    sem_sets: &[SemanticSet],
    item: usize,
    snap_u: &Array1<f64>,
    snap_i: &Array1<f64>,
) -> Result<Array1<f64>> {
    use crate::autodiff::Tape;
    let set = &sem_sets[item];
    let mut tape = Tape::new();
    match params.cfg.semantics {
        SemanticsMode::Off => Err(Error::Train("no semantic feature in plain mode".into())),
        SemanticsMode::Sum => {
            let ids = params.handles.sum_sem.expect("sum aggregator allocated");
            let w = tape.leaf(params.value(ids.w_s).clone());
            let b = tape.leaf(params.value(ids.b_s).clone());
            let out = crate::semantics::tape_sum_aggregate(&mut tape, w, b, set);
            Ok(crate::model::uncol(tape.value(out)))
        }
        SemanticsMode::UsAttn => {
            let ids = params.handles.usattn.expect("usattn allocated");
            let w_u = tape.leaf(params.value(ids.w_u).clone());
            let w_i = tape.leaf(params.value(ids.w_i).clone());
            let b_ui = tape.leaf(params.value(ids.b_ui).clone());
            let eu = tape.leaf_vec(snap_u.as_slice().expect("contiguous"));
            let ei = tape.leaf_vec(snap_i.as_slice().expect("contiguous"));
            let e_jk = crate::semantics::tape_user_specific_embedding(
                &mut tape, w_u, w_i, b_ui, eu, ei,
            );
            let w_q = tape.leaf(params.value(ids.w_q).clone());
            let w_k = tape.leaf(params.value(ids.w_k).clone());
            let w_v = tape.leaf(params.value(ids.w_v).clone());
            let (s_jk, _) =
                crate::semantics::tape_usattn(&mut tape, w_q, w_k, w_v, e_jk, set);
            let s_k =
                crate::semantics::tape_skip_connect(&mut tape, s_jk, e_jk, set.n_genres());
            Ok(crate::model::uncol(tape.value(s_k)))
        }
    }
}

/// After the optimizer step: stores the batch's predictions as the nodes'
/// last embeddings and pushes the batch's messages into both endpoints'
/// buffers (they are absorbed into memories at the next read).
pub fn apply_batch_messages(
    params: &ModelParams,
    catalog: &NodeCatalog,
    sem_sets: Option<&[SemanticSet]>,
    states: &mut NodeStates,
    events: &[InteractionEvent],
    pos_embeddings: &[(usize, usize, Array1<f64>, Array1<f64>)],
) -> Result<()> {
    let semantics_on = params.cfg.semantics != SemanticsMode::Off;
    let use_attn = params.cfg.semantics == SemanticsMode::UsAttn;
    for (k, ev) in events.iter().enumerate() {
        if let Some((u, i, e_u, e_i)) = pos_embeddings.get(k) {
            debug_assert_eq!((*u, *i), (ev.user, ev.item));
            states.get_mut(NodeId::User(*u)).last_embedding = Some(e_u.clone());
            states.get_mut(NodeId::Item(*i)).last_embedding = Some(e_i.clone());
        }
        let zeros = || Array1::zeros(params.cfg.d_emb);
        let snap_u = states
            .get(NodeId::User(ev.user))
            .last_embedding
            .clone()
            .unwrap_or_else(zeros);
        let snap_i = states
            .get(NodeId::Item(ev.item))
            .last_embedding
            .clone()
            .unwrap_or_else(zeros);
        let (s_k, snapshot) = if semantics_on {
            let sets = sem_sets
                .ok_or_else(|| Error::Train("semantic variant without encoded genres".into()))?;
            let s = plain_semantic_feature(params, sets, ev.item, &snap_u, &snap_i)?;
            (Some(s), use_attn.then(|| (snap_u, snap_i)))
        } else {
            (None, None)
        };
        let fusion = params.handles.fusion.map(|f| crate::temporal::MessageFusionParams {
            w1: params.value(f.w1).clone(),
            w2: params.value(f.w2).clone(),
        });
        let msg = crate::temporal::build_message(
            ev,
            catalog,
            s_k.as_ref(),
            fusion.as_ref(),
            snapshot,
        )?;
        states.push_message(ev.user, ev.item, msg);
    }
    Ok(())
}

/// One epoch row of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_batch_loss: f64,
    pub sum_loss: f64,
    pub batches: usize,
}

/// Training artifacts.
pub struct TrainOutput {
    pub params: ModelParams,
    pub states: NodeStates,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub epoch_records: Vec<EpochRecord>,
    pub train_seconds: f64,
}

/// Runs the batched training loop over the training range.
///
/// Per batch, in order: negatives are sampled, embeddings and predictions
/// are computed against memories as of the batch start (pending messages
/// absorb on the tape, so gradients flow through one memory update), the
/// summed loss is stepped, and only then do the batch's own messages enter
/// the buffers.
pub fn train(
    store: &EventStore,
    catalog: &NodeCatalog,
    sem_sets: Option<&[SemanticSet]>,
    train_range: Range<usize>,
    cfg: &TrainConfig,
    abort_checkpoint: Option<&std::path::Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_range.is_empty() {
        return Err(Error::Train("empty training range".into()));
    }
    let started = std::time::Instant::now();
    let d_s = sem_sets.map(|s| s.first().map(|x| x.vectors[0].len()).unwrap_or(0)).unwrap_or(0);
    let scales = raw_message_scales(store, catalog, train_range.clone());
    let mut params = ModelParams::init_scaled(cfg, d_s, Some(&scales))?;
    let mut states = NodeStates::new(
        store.n_users(),
        store.n_items(),
        cfg.d_m,
        cfg.msg_buffer_capacity,
        cfg.aoi_max_age_secs,
    );
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut neg_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ NEGATIVE_RNG_SALT);
    let all_items: Vec<usize> = (0..store.n_items()).collect();

    let events = &store.events[train_range.clone()];
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut epoch_records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        states.reset();
        let mut sum_loss = 0.0;
        let mut batches = 0usize;
        for batch_start in (0..events.len()).step_by(cfg.batch_size) {
            let batch = &events[batch_start..(batch_start + cfg.batch_size).min(events.len())];
            let negatives: Vec<Vec<usize>> = batch
                .iter()
                .map(|ev| {
                    (0..cfg.negatives_per_positive)
                        .map(|_| sample_negative(&all_items, ev.item, &mut neg_rng))
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let cursor = train_range.start + batch_start;
            let absorb_t = batch[0].timestamp;
            let out = run_batch(
                &params, store, sem_sets, &states, batch, &negatives, cursor, absorb_t, true,
            )?;
            if !out.loss.is_finite() {
                if let Some(path) = abort_checkpoint {
                    Checkpoint::from_params(&params).save(path)?;
                }
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}; last finite state checkpointed"
                )));
            }
            opt.step(&mut params, out.grads.as_ref().expect("gradients requested"));
            apply_absorptions(&mut states, &out.absorbed, absorb_t);
            apply_batch_messages(
                &params,
                catalog,
                sem_sets,
                &mut states,
                batch,
                &out.pos_embeddings,
            )?;
            sum_loss += out.loss;
            batches += 1;
        }
        let mean = sum_loss / batches as f64;
        log::info!("epoch {epoch}: mean batch loss {mean:.6}");
        loss_curve.push(mean);
        epoch_records.push(EpochRecord { epoch, mean_batch_loss: mean, sum_loss, batches });
    }

    Ok(TrainOutput {
        params,
        states,
        loss_curve,
        epoch_records,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Per-column maximum magnitude of the raw messages in a range, used for
/// scale-aware initialization.
pub fn raw_message_scales(
    store: &EventStore,
    catalog: &NodeCatalog,
    range: Range<usize>,
) -> Vec<f64> {
    let d_msg = 2 * catalog.d_v + catalog.d_e + 1;
    let mut scales = vec![0.0f64; d_msg];
    for ev in &store.events[range] {
        let raw = crate::temporal::raw_message(ev, catalog);
        for (s, v) in scales.iter_mut().zip(raw.iter()) {
            *s = s.max(v.abs());
        }
    }
    scales
}

/// Outcome of a finite-difference gradient verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub n_scalars: usize,
    pub retries: usize,
}

/// Self-contained four-event fixture for gradient checking: three users,
/// two items, two one-hot genres.
fn grad_check_fixture(
    cfg: &TrainConfig,
    seed: u64,
) -> (EventStore, NodeCatalog, Vec<SemanticSet>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut feat = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()).collect()
    };
    let catalog = NodeCatalog {
        user_names: vec!["u0".into(), "u1".into(), "u2".into()],
        item_names: vec!["i0".into(), "i1".into()],
        user_features: feat(3, cfg.d_v),
        item_features: feat(2, cfg.d_v),
        item_genres: vec![vec!["g0".into()], vec!["g0".into(), "g1".into()]],
        d_v: cfg.d_v,
        d_e: cfg.d_e,
    };
    // Timestamps stay O(1): a kink-crossing window under finite
    // differencing scales with the largest co-input, and the timestamp is
    // the raw message's largest entry.
    let mut events = Vec::new();
    for (k, (u, i, t)) in [(0, 0, 0.5), (1, 1, 1.0), (2, 0, 1.5), (0, 1, 2.0)]
        .into_iter()
        .enumerate()
    {
        events.push(InteractionEvent {
            event_index: k,
            user: u,
            item: i,
            timestamp: t,
            edge_features: (0..cfg.d_e).map(|_| rng.random_range(-0.5..0.5)).collect(),
            duration: 300.0,
        });
    }
    let store = EventStore::new(events, 3, 2);
    let table = crate::semantics::GenreEmbeddingTable::one_hot(&catalog);
    let sets = crate::semantics::encode_genres(&catalog, &table).expect("fixture genres");
    (store, catalog, sets)
}

/// Central finite-difference check of every trainable tensor on a tiny
/// two-batch scenario: batch one fills buffers and embedding caches, batch
/// two's loss is differentiated. Proximity to a ReLU kink triggers a
/// reseeded retry, at most three times.
pub fn grad_check(cfg: &TrainConfig, epsilon: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let kink_threshold = 20.0 * epsilon;
    let mut last_report = None;
    for retry in 0..3 {
        let fixture_seed = cfg.seed.wrapping_add(1000 + retry);
        let (store, catalog, sets) = grad_check_fixture(cfg, fixture_seed);
        let sem_sets =
            (cfg.semantics != SemanticsMode::Off).then_some(sets.as_slice());
        let mut check_cfg = cfg.clone();
        check_cfg.seed = cfg.seed.wrapping_add(retry);
        let scales = raw_message_scales(&store, &catalog, 0..store.len());
        let mut params = ModelParams::init_scaled(&check_cfg, 2, Some(&scales))?;
        {
            // Check at a generic point: the geometric frequency ladder ends
            // in entries near 1e-9 whose true gradients sit below what a
            // finite difference can resolve.
            let mut rng = ChaCha12Rng::seed_from_u64(fixture_seed ^ 0xf00d);
            let omegas = params.handles.time_omegas;
            params
                .value_mut(omegas)
                .mapv_inplace(|_| rng.random_range(0.1..2.0));
        }
        let mut states = NodeStates::new(
            store.n_users(),
            store.n_items(),
            cfg.d_m,
            cfg.msg_buffer_capacity,
            cfg.aoi_max_age_secs,
        );

        // Batch one: predictions populate the embedding caches, messages
        // fill the buffers; no optimizer step.
        let warm = &store.events[0..2];
        let warm_negs = vec![vec![1], vec![0]];
        let out = run_batch(
            &params, &store, sem_sets, &states, warm, &warm_negs, 0, warm[0].timestamp, false,
        )?;
        apply_absorptions(&mut states, &out.absorbed, warm[0].timestamp);
        apply_batch_messages(&params, &catalog, sem_sets, &mut states, warm, &out.pos_embeddings)?;

        // Batch two is the differentiated loss.
        let batch = &store.events[2..4];
        let negs = vec![vec![1], vec![0]];
        let absorb_t = batch[0].timestamp;
        let loss_of = |p: &ModelParams| -> Result<f64> {
            Ok(run_batch(p, &store, sem_sets, &states, batch, &negs, 2, absorb_t, false)?.loss)
        };

        let analytic = run_batch(
            &params, &store, sem_sets, &states, batch, &negs, 2, absorb_t, true,
        )?;
        let grads = analytic.grads.as_ref().expect("gradients requested");

        let mut max_rel = 0.0;
        let mut worst = String::new();
        let n_scalars = params.n_scalars();
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.iter().enumerate() {
            let dim = params.value(*id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = params.value(*id)[[r, c]];
                    params.value_mut(*id)[[r, c]] = orig + epsilon;
                    let up = loss_of(&params)?;
                    params.value_mut(*id)[[r, c]] = orig - epsilon;
                    let down = loss_of(&params)?;
                    params.value_mut(*id)[[r, c]] = orig;
                    let fd = (up - down) / (2.0 * epsilon);
                    let ga = grads[k][[r, c]];
                    // A central difference cannot resolve discrepancies
                    // below the rounding of the two loss evaluations;
                    // mismatches inside that band are agreement.
                    let resolution =
                        32.0 * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * epsilon);
                    let mismatch = (ga - fd).abs();
                    let mismatch = if mismatch <= resolution { 0.0 } else { mismatch };
                    let rel = mismatch / f64::max(1e-8, ga.abs() + fd.abs());
                    if rel > max_rel {
                        max_rel = rel;
                        worst = format!("{}[{r},{c}]", params.name(*id));
                    }
                }
            }
        }

        let report = GradCheckReport {
            max_rel_error: max_rel,
            worst_tensor: worst,
            n_scalars,
            retries: retry as usize,
        };
        if analytic.min_kink_gap >= kink_threshold {
            return Ok(report);
        }
        log::debug!(
            "gradient check near a ReLU kink (gap {:.2e}); retrying",
            analytic.min_kink_gap
        );
        last_report = Some(report);
    }
    Ok(last_report.expect("at least one attempt ran"))
}

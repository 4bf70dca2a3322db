//! Structural learning: the cosine time encoder, the Fourier-feature
//! semantic positional encoder, memory augmentation, and multi-head
//! temporal graph attention over sampled neighborhoods.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Trainable frequencies of the time encoder.
#[derive(Debug, Clone)]
pub struct TimeEncoderParams {
    pub omegas: Array1<f64>,
}

impl TimeEncoderParams {
    /// Geometrically spaced initial frequencies from 1 down to 1e-9,
    /// covering second-to-year time gaps.
    pub fn geometric(d_t: usize) -> Self {
        let omegas = Array1::from_shape_fn(d_t, |i| {
            if d_t == 1 {
                1.0
            } else {
                10f64.powf(-9.0 * i as f64 / (d_t as f64 - 1.0))
            }
        });
        TimeEncoderParams { omegas }
    }
}

/// `sqrt(1/d_t) * [cos(w_1 dt), ..., cos(w_d dt)]`.
pub fn encode_time(dt: f64, params: &TimeEncoderParams) -> Array1<f64> {
    let d = params.omegas.len();
    params.omegas.mapv(|w| (w * dt).cos()) * (1.0 / d as f64).sqrt()
}

/// Tape form of [`encode_time`]; `omegas` is a `(d_t, 1)` column.
pub fn tape_encode_time(tape: &mut Tape, omegas: VarId, dt: f64) -> VarId {
    let d = tape.value(omegas).nrows();
    let scaled = tape.scale(omegas, dt);
    let c = tape.cos(scaled);
    tape.scale(c, (1.0 / d as f64).sqrt())
}

/// Weights of the semantic positional encoder: a feature-enhancement MLP,
/// the Fourier projection (rows initialized i.i.d. standard normal), and
/// the trailing two-layer map.
#[derive(Debug, Clone)]
pub struct SpeParams {
    pub phi1_w1: Array2<f64>,
    pub phi1_b1: Array1<f64>,
    pub phi1_w2: Array2<f64>,
    pub phi1_b2: Array1<f64>,
    pub w_p: Array2<f64>,
    pub w1_p: Array2<f64>,
    pub w2_p: Array2<f64>,
}

/// Raw Fourier position map `(1/sqrt(D)) [cos(W x) || sin(W x)]` with the
/// enhancement MLP bypassed. `w_p` has `D/2` rows.
pub fn fourier_position_features(x: &Array1<f64>, w_p: &Array2<f64>) -> Array1<f64> {
    let proj = w_p.dot(x);
    let d = 2 * w_p.nrows();
    let scale = (1.0 / d as f64).sqrt();
    let mut out = Array1::zeros(d);
    for (k, v) in proj.iter().enumerate() {
        out[k] = v.cos() * scale;
        out[k + w_p.nrows()] = v.sin() * scale;
    }
    out
}

/// Tape handles for the positional encoder's tensors.
#[derive(Debug, Clone, Copy)]
pub struct SpeVarIds {
    pub phi1_w1: VarId,
    pub phi1_b1: VarId,
    pub phi1_w2: VarId,
    pub phi1_b2: VarId,
    pub w_p: VarId,
    pub w1_p: VarId,
    pub w2_p: VarId,
}

/// Tape form of the positional encoder:
/// `r = (1/sqrt(D)) [cos(W_p phi1(s)) || sin(W_p phi1(s))]`,
/// `out = W2 gelu(W1 r)`. Returns `(out, r)`.
pub fn tape_spe(tape: &mut Tape, p: &SpeVarIds, s_k: VarId) -> (VarId, VarId) {
    let h1 = tape.matmul(p.phi1_w1, s_k);
    let h1 = tape.add(h1, p.phi1_b1);
    let h1 = tape.gelu(h1);
    let z = tape.matmul(p.phi1_w2, h1);
    let z = tape.add(z, p.phi1_b2);

    let proj = tape.matmul(p.w_p, z);
    let c = tape.cos(proj);
    let s = tape.sin(proj);
    let r = tape.concat(&[c, s]);
    let d = tape.value(r).nrows();
    let r = tape.scale(r, (1.0 / d as f64).sqrt());

    let mid = tape.matmul(p.w1_p, r);
    let mid = tape.gelu(mid);
    let out = tape.matmul(p.w2_p, mid);
    (out, r)
}

/// Full positional encoding of an aggregated semantic feature.
pub fn encode_semantic_position(s_k: &Array1<f64>, params: &SpeParams) -> Result<Array1<f64>> {
    if params.phi1_w1.ncols() != s_k.len() {
        return Err(Error::Shape("positional encoder input width mismatch".into()));
    }
    let mut tape = Tape::new();
    let ids = SpeVarIds {
        phi1_w1: tape.leaf(params.phi1_w1.clone()),
        phi1_b1: tape.leaf(col(&params.phi1_b1)),
        phi1_w2: tape.leaf(params.phi1_w2.clone()),
        phi1_b2: tape.leaf(col(&params.phi1_b2)),
        w_p: tape.leaf(params.w_p.clone()),
        w1_p: tape.leaf(params.w1_p.clone()),
        w2_p: tape.leaf(params.w2_p.clone()),
    };
    let s = tape.leaf(col(s_k));
    let (out, _) = tape_spe(&mut tape, &ids, s);
    Ok(uncol(tape.value(out)))
}

/// Where a node sits in the sub-graph being embedded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    /// The center node; its time gap is defined as zero.
    Center,
    /// A neighbor whose interaction happened at the given time.
    Neighbor { interaction_time: f64 },
}

/// `[mem || semantic block || time encoding]` for one node. User nodes in
/// semantic modes pass a zero block of matching width so center and
/// neighbor widths agree across the bipartite sub-graph.
pub fn augment_memory(
    mem: &Array1<f64>,
    sem_block: Option<&Array1<f64>>,
    role: Role,
    t_hat: f64,
    time: &TimeEncoderParams,
) -> Result<Array1<f64>> {
    let dt = match role {
        Role::Center => 0.0,
        Role::Neighbor { interaction_time } => {
            if t_hat < interaction_time {
                return Err(Error::Train(format!(
                    "future neighbor: interaction at {interaction_time} queried at {t_hat}"
                )));
            }
            t_hat - interaction_time
        }
    };
    let phi = encode_time(dt, time);
    let sem_len = sem_block.map(|s| s.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(mem.len() + sem_len + phi.len());
    out.extend(mem.iter());
    if let Some(s) = sem_block {
        out.extend(s.iter());
    }
    out.extend(phi.iter());
    Ok(Array1::from_vec(out))
}

/// One graph-attention layer's tensors.
#[derive(Debug, Clone)]
pub struct TgatLayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

/// Tape handles for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct TgatLayerVarIds {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub ff_w1: VarId,
    pub ff_b1: VarId,
    pub ff_w2: VarId,
    pub ff_b2: VarId,
}

/// Multi-head scaled dot-product attention of an augmented center against
/// augmented neighbors, followed by a feed-forward over
/// `[center || attention output]`. With no neighbors the aggregation block
/// is zero. Softmax nodes are appended to `probes` for invariant checks.
pub fn tape_tgat_layer(
    tape: &mut Tape,
    p: &TgatLayerVarIds,
    n_heads: usize,
    center: VarId,
    neighbors: &[VarId],
    probes: &mut Vec<VarId>,
) -> VarId {
    let d_att = tape.value(p.w_q).nrows();
    assert_eq!(d_att % n_heads, 0, "head width must divide attention width");
    let dh = d_att / n_heads;

    let attn_out = if neighbors.is_empty() {
        tape.zeros(d_att)
    } else {
        let q = tape.matmul(p.w_q, center);
        let keys: Vec<VarId> = neighbors.iter().map(|&n| tape.matmul(p.w_k, n)).collect();
        let values: Vec<VarId> = neighbors.iter().map(|&n| tape.matmul(p.w_v, n)).collect();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_rows(q, h * dh, dh);
            let mut logits = Vec::with_capacity(keys.len());
            for &k in &keys {
                let kh = tape.slice_rows(k, h * dh, dh);
                let d = tape.dot(qh, kh);
                logits.push(tape.scale(d, 1.0 / (dh as f64).sqrt()));
            }
            let logits = tape.concat(&logits);
            let alphas = tape.softmax(logits);
            probes.push(alphas);
            let mut acc: Option<VarId> = None;
            for (n, &v) in values.iter().enumerate() {
                let vh = tape.slice_rows(v, h * dh, dh);
                let a_n = tape.slice_rows(alphas, n, 1);
                let term = tape.matmul(vh, a_n);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term),
                });
            }
            heads.push(acc.expect("non-empty neighborhood"));
        }
        tape.concat(&heads)
    };

    let ff_in = tape.concat(&[center, attn_out]);
    let hidden = tape.matmul(p.ff_w1, ff_in);
    let hidden = tape.add(hidden, p.ff_b1);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(p.ff_w2, hidden);
    tape.add(out, p.ff_b2)
}

/// Plain evaluation of one attention layer; returns the output and the
/// per-head attention weight vectors.
pub fn tgat_attend(
    params: &TgatLayerParams,
    n_heads: usize,
    center: &Array1<f64>,
    neighbors: &[Array1<f64>],
) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
    if params.w_q.ncols() != center.len() {
        return Err(Error::Shape("attention input width mismatch".into()));
    }
    let mut tape = Tape::new();
    let ids = TgatLayerVarIds {
        w_q: tape.leaf(params.w_q.clone()),
        w_k: tape.leaf(params.w_k.clone()),
        w_v: tape.leaf(params.w_v.clone()),
        ff_w1: tape.leaf(params.ff_w1.clone()),
        ff_b1: tape.leaf(col(&params.ff_b1)),
        ff_w2: tape.leaf(params.ff_w2.clone()),
        ff_b2: tape.leaf(col(&params.ff_b2)),
    };
    let c = tape.leaf(col(center));
    let ns: Vec<VarId> = neighbors.iter().map(|n| tape.leaf(col(n))).collect();
    let mut probes = Vec::new();
    let out = tape_tgat_layer(&mut tape, &ids, n_heads, c, &ns, &mut probes);
    let alphas = probes.iter().map(|&p| uncol(tape.value(p))).collect();
    Ok((uncol(tape.value(out)), alphas))
}

fn col(v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

fn uncol(v: &Array2<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    #[test]
    fn time_encoding_hand_cases() {
        let p = TimeEncoderParams { omegas: array![0.3, 1.7, 9.0, 0.01] };
        let phi = encode_time(0.0, &p);
        assert_eq!(phi, array![0.5, 0.5, 0.5, 0.5]);

        let p = TimeEncoderParams { omegas: array![PI] };
        let phi = encode_time(1.0, &p);
        assert!((phi[0] + 1.0).abs() < 1e-12);

        let p = TimeEncoderParams { omegas: array![PI / 2.0, PI] };
        let phi = encode_time(1.0, &p);
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!(phi[0].abs() < 1e-12);
        assert!((phi[1] + inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn zero_gap_encoding_has_unit_norm() {
        for d in [1usize, 4, 100] {
            let p = TimeEncoderParams::geometric(d);
            let phi = encode_time(0.0, &p);
            assert!((phi.dot(&phi) - 1.0).abs() < 1e-12, "d_t = {d}");
        }
    }

    fn random_spe(d_in: usize, fourier: usize, d_out: usize, seed: u64) -> SpeParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5))
        };
        SpeParams {
            phi1_w1: m(d_in, d_in),
            phi1_b1: Array1::zeros(d_in),
            phi1_w2: m(d_in, d_in),
            phi1_b2: Array1::zeros(d_in),
            w_p: m(fourier / 2, d_in),
            w1_p: m(d_out, fourier),
            w2_p: m(d_out, d_out),
        }
    }

    #[test]
    fn fourier_features_have_squared_norm_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w = Array2::from_shape_fn((8, 3), |_| rng.random_range(-2.0..2.0));
            let x = Array1::from_shape_fn(3, |_| rng.random_range(-3.0..3.0));
            let r = fourier_position_features(&x, &w);
            assert!((r.dot(&r) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_positions_share_half_inner_product() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let w = Array2::from_shape_fn((16, 4), |_| rng.random_range(-1.0..1.0));
        let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let r = fourier_position_features(&x, &w);
        assert!((r.dot(&r) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fourier_inner_product_is_translation_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = Array2::from_shape_fn((32, 3), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        for _ in 0..10 {
            let a = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let c = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let base = fourier_position_features(&a, &w)
                .dot(&fourier_position_features(&b, &w));
            let shifted = fourier_position_features(&(&a + &c), &w)
                .dot(&fourier_position_features(&(&b + &c), &w));
            assert!((base - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn fourier_inner_product_tracks_gaussian_kernel() {
        // Monte Carlo check of the kernel the encoder approximates: with
        // standard-normal rows, <R(a), R(b)> -> 0.5 exp(-|a-b|^2 / 2).
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let d = 4;
        let w = Array2::from_shape_fn((512, d), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let mut total = 0.0;
        let n_pairs = 40;
        for _ in 0..n_pairs {
            let a = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let got = fourier_position_features(&a, &w).dot(&fourier_position_features(&b, &w));
            let delta = &a - &b;
            let want = 0.5 * (-delta.dot(&delta) / 2.0).exp();
            total += (got - want).abs();
        }
        assert!(total / n_pairs as f64 <= 0.05);
    }

    #[test]
    fn spe_output_width_and_determinism() {
        let params = random_spe(3, 8, 5, 1);
        let s = array![0.2, -0.4, 1.0];
        let a = encode_semantic_position(&s, &params).unwrap();
        let b = encode_semantic_position(&s, &params).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn augment_widths_by_mode() {
        let time = TimeEncoderParams::geometric(3);
        let mem = array![1.0, 2.0];
        // Semantics off: d_m + d_t.
        let v = augment_memory(&mem, None, Role::Center, 10.0, &time).unwrap();
        assert_eq!(v.len(), 5);
        // Semantic block attached: d_m + d_h + d_t.
        let sem = array![0.5, 0.5, 0.5, 0.5];
        let v = augment_memory(&mem, Some(&sem), Role::Center, 10.0, &time).unwrap();
        assert_eq!(v.len(), 9);
        // Center time block is the zero-gap encoding.
        let tail = v.slice(ndarray::s![6..]).to_owned();
        assert_eq!(tail, encode_time(0.0, &time));
    }

    #[test]
    fn future_neighbors_are_rejected() {
        let time = TimeEncoderParams::geometric(2);
        let mem = array![0.0];
        let err = augment_memory(
            &mem,
            None,
            Role::Neighbor { interaction_time: 11.0 },
            10.0,
            &time,
        );
        assert!(err.is_err());
    }

    fn random_layer(width: usize, d_att: usize, d_out: usize, seed: u64) -> TgatLayerParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-0.7..0.7))
        };
        TgatLayerParams {
            w_q: m(d_att, width),
            w_k: m(d_att, width),
            w_v: m(d_att, width),
            ff_w1: m(d_out, width + d_att),
            ff_b1: Array1::zeros(d_out),
            ff_w2: m(d_out, d_out),
            ff_b2: Array1::zeros(d_out),
        }
    }

    #[test]
    fn single_neighbor_takes_all_attention() {
        let params = random_layer(4, 4, 3, 2);
        let center = array![0.3, -0.1, 0.2, 0.9];
        let nbr = array![1.0, 0.5, -0.5, 0.0];
        let (_, alphas) = tgat_attend(&params, 2, &center, &[nbr]).unwrap();
        assert_eq!(alphas.len(), 2);
        for a in alphas {
            assert_eq!(a.len(), 1);
            assert!((a[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let params = random_layer(3, 4, 3, 3);
        let center = array![0.5, 0.5, -0.2];
        let n = array![1.0, 2.0, 3.0];
        let (out, alphas) = tgat_attend(&params, 2, &center, &[n.clone(), n.clone()]).unwrap();
        for a in &alphas {
            assert!((a[0] - 0.5).abs() < 1e-12);
            assert!((a[1] - 0.5).abs() < 1e-12);
        }
        // Two identical neighbors aggregate to the same vector as one.
        let (single, _) = tgat_attend(&params, 2, &center, &[n]).unwrap();
        for k in 0..out.len() {
            assert!((out[k] - single[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_neighbors_use_center_only_path() {
        let params = random_layer(3, 4, 3, 4);
        let center = array![0.5, -0.5, 0.25];
        let (out, alphas) = tgat_attend(&params, 2, &center, &[]).unwrap();
        assert!(alphas.is_empty());
        // Independent recompute: feed-forward over [center || 0].
        let mut ff_in = Array1::zeros(3 + 4);
        for k in 0..3 {
            ff_in[k] = center[k];
        }
        let hidden = (params.ff_w1.dot(&ff_in) + &params.ff_b1).mapv(|x| x.max(0.0));
        let want = params.ff_w2.dot(&hidden) + &params.ff_b2;
        for k in 0..out.len() {
            assert!((out[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_neighbor_permutation_invariant() {
        let params = random_layer(3, 4, 3, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let center = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let nbrs: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let (a, _) = tgat_attend(&params, 2, &center, &nbrs).unwrap();
        let mut reversed = nbrs.clone();
        reversed.reverse();
        let (b, _) = tgat_attend(&params, 2, &center, &reversed).unwrap();
        for k in 0..a.len() {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_under_random_configs() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for trial in 0..50 {
            let width = rng.random_range(2..6usize);
            let heads = [1usize, 2][trial % 2];
            let d_att = heads * rng.random_range(1..4usize);
            let params = random_layer(width, d_att, 3, 100 + trial as u64);
            let center = Array1::from_shape_fn(width, |_| rng.random_range(-2.0..2.0));
            let n = rng.random_range(1..6usize);
            let nbrs: Vec<Array1<f64>> = (0..n)
                .map(|_| Array1::from_shape_fn(width, |_| rng.random_range(-2.0..2.0)))
                .collect();
            let (_, alphas) = tgat_attend(&params, heads, &center, &nbrs).unwrap();
            assert_eq!(alphas.len(), heads);
            for a in alphas {
                assert!((a.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}

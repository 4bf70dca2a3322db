//! Genre semantics: embedding tables, per-item semantic sets, the summation
//! and user-specific attention aggregators, and cosine-similarity reporting.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::graph::NodeCatalog;
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Token-to-vector table, either one-hot over a catalog vocabulary or
/// loaded from a pretrained-vector file.
#[derive(Debug, Clone)]
pub struct GenreEmbeddingTable {
    vectors: BTreeMap<String, Array1<f64>>,
    d_s: usize,
    one_hot: bool,
}

impl GenreEmbeddingTable {
    /// Basis vectors over the lexicographically sorted vocabulary of every
    /// genre token in the catalog.
    pub fn one_hot(catalog: &NodeCatalog) -> Self {
        let mut vocab: Vec<&String> = catalog.item_genres.iter().flatten().collect();
        vocab.sort();
        vocab.dedup();
        let d_s = vocab.len();
        let vectors = vocab
            .into_iter()
            .enumerate()
            .map(|(k, tok)| {
                let mut v = Array1::zeros(d_s);
                v[k] = 1.0;
                (tok.clone(), v)
            })
            .collect();
        GenreEmbeddingTable { vectors, d_s, one_hot: true }
    }

    /// Loads `token v1 v2 ... vD` lines; the width of the first line is
    /// enforced on the rest.
    pub fn from_reader<R: std::io::BufRead>(reader: R) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut d_s = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::Semantics(format!("line {}: empty", lineno + 1)))?
                .to_string();
            let vals: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            let vals = vals.map_err(|_| {
                Error::Semantics(format!("line {}: unparseable vector", lineno + 1))
            })?;
            match d_s {
                None => {
                    if vals.is_empty() {
                        return Err(Error::Semantics(format!(
                            "line {}: vector has width 0",
                            lineno + 1
                        )));
                    }
                    d_s = Some(vals.len());
                }
                Some(d) if d != vals.len() => {
                    return Err(Error::Semantics(format!(
                        "line {}: width {} != {}",
                        lineno + 1,
                        vals.len(),
                        d
                    )));
                }
                _ => {}
            }
            vectors.insert(token, Array1::from_vec(vals));
        }
        let d_s = d_s.ok_or_else(|| Error::Semantics("empty embedding table".into()))?;
        Ok(GenreEmbeddingTable { vectors, d_s, one_hot: false })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn is_one_hot(&self) -> bool {
        self.one_hot
    }

    pub fn get(&self, token: &str) -> Option<&Array1<f64>> {
        self.vectors.get(token)
    }
}

/// The encoded genre vectors of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSet {
    pub item: usize,
    pub vectors: Vec<Array1<f64>>,
}

impl SemanticSet {
    pub fn n_genres(&self) -> usize {
        self.vectors.len()
    }
}

/// Encodes every item's genre list, preserving catalog order. Unknown
/// tokens are an error listing the offenders, never silent zero vectors.
pub fn encode_genres(
    catalog: &NodeCatalog,
    table: &GenreEmbeddingTable,
) -> Result<Vec<SemanticSet>> {
    let mut missing: Vec<String> = Vec::new();
    let mut sets = Vec::with_capacity(catalog.n_items());
    for (item, genres) in catalog.item_genres.iter().enumerate() {
        let mut vectors = Vec::with_capacity(genres.len());
        for g in genres {
            match table.get(g) {
                Some(v) => vectors.push(v.clone()),
                None => missing.push(g.clone()),
            }
        }
        sets.push(SemanticSet { item, vectors });
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Semantics(format!(
            "unknown genre tokens: {}",
            missing.join(", ")
        )));
    }
    Ok(sets)
}

/// Trainable tensors of the semantic aggregators.
#[derive(Debug, Clone)]
pub struct SemanticAggregatorParams {
    pub w_s: Array2<f64>,
    pub b_s: Array1<f64>,
    /// Query/key/value projections shared across genre slots.
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_u: Array2<f64>,
    pub w_i: Array2<f64>,
    pub b_ui: Array1<f64>,
}

fn col(v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

fn uncol(v: &Array2<f64>) -> Array1<f64> {
    Array1::from_vec(v.iter().copied().collect())
}

/// Tape form of the summation aggregator: `sum_n relu(W_s s_n + b_s)`.
pub fn tape_sum_aggregate(
    tape: &mut Tape,
    w_s: VarId,
    b_s: VarId,
    set: &SemanticSet,
) -> VarId {
    assert!(!set.vectors.is_empty(), "semantic set must be non-empty");
    let mut acc: Option<VarId> = None;
    for s in &set.vectors {
        let sv = tape.leaf(col(s));
        let lin = tape.matmul(w_s, sv);
        let lin = tape.add(lin, b_s);
        let term = tape.relu(lin);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.expect("non-empty set")
}

/// Tape form of the user-specific embedding:
/// `leaky_relu(W_u e_u + W_i e_i + b_ui)`.
pub fn tape_user_specific_embedding(
    tape: &mut Tape,
    w_u: VarId,
    w_i: VarId,
    b_ui: VarId,
    e_u_prev: VarId,
    e_i_prev: VarId,
) -> VarId {
    let a = tape.matmul(w_u, e_u_prev);
    let b = tape.matmul(w_i, e_i_prev);
    let s = tape.add(a, b);
    let s = tape.add(s, b_ui);
    tape.leaky_relu(s, LEAKY_RELU_SLOPE)
}

/// Tape form of the user-specific attention aggregator. Returns the
/// aggregated feature and the attention coefficients.
pub fn tape_usattn(
    tape: &mut Tape,
    w_q: VarId,
    w_k: VarId,
    w_v: VarId,
    e_jk: VarId,
    set: &SemanticSet,
) -> (VarId, VarId) {
    assert!(!set.vectors.is_empty(), "semantic set must be non-empty");
    let q = tape.matmul(w_q, e_jk);
    let mut logits = Vec::with_capacity(set.n_genres());
    let mut values = Vec::with_capacity(set.n_genres());
    for s in &set.vectors {
        let sv = tape.leaf(col(s));
        let k = tape.matmul(w_k, sv);
        logits.push(tape.dot(q, k));
        values.push(tape.matmul(w_v, sv));
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
    let s_jk = tape.relu(acc.expect("non-empty set"));
    (s_jk, alphas)
}

/// Tape form of the skip connection: `n_genres * s_jk + e_jk`.
pub fn tape_skip_connect(tape: &mut Tape, s_jk: VarId, e_jk: VarId, n_genres: usize) -> VarId {
    let scaled = tape.scale(s_jk, n_genres as f64);
    tape.add(scaled, e_jk)
}

/// `S_k = sum_n relu(W_s s_n + b_s)` over an item's genre vectors.
pub fn aggregate_sum(set: &SemanticSet, params: &SemanticAggregatorParams) -> Result<Array1<f64>> {
    if set.vectors.is_empty() {
        return Err(Error::Semantics("semantic set is empty".into()));
    }
    if set.vectors[0].len() != params.w_s.ncols() {
        return Err(Error::Shape(format!(
            "aggregate_sum: genre width {} vs W_s columns {}",
            set.vectors[0].len(),
            params.w_s.ncols()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(params.w_s.clone());
    let b = tape.leaf(col(&params.b_s));
    let out = tape_sum_aggregate(&mut tape, w, b, set);
    Ok(uncol(tape.value(out)))
}

/// Joint user-item embedding fed to the attention aggregator.
pub fn user_specific_embedding(
    e_u_prev: &Array1<f64>,
    e_i_prev: &Array1<f64>,
    params: &SemanticAggregatorParams,
) -> Result<Array1<f64>> {
    if e_u_prev.len() != params.w_u.ncols() || e_i_prev.len() != params.w_i.ncols() {
        return Err(Error::Shape("user_specific_embedding: width mismatch".into()));
    }
    let mut tape = Tape::new();
    let w_u = tape.leaf(params.w_u.clone());
    let w_i = tape.leaf(params.w_i.clone());
    let b = tape.leaf(col(&params.b_ui));
    let eu = tape.leaf(col(e_u_prev));
    let ei = tape.leaf(col(e_i_prev));
    let out = tape_user_specific_embedding(&mut tape, w_u, w_i, b, eu, ei);
    Ok(uncol(tape.value(out)))
}

/// Attention-weighted aggregation of an item's genre vectors, queried by a
/// user-specific embedding. Returns the aggregated feature and the
/// attention coefficients (a probability simplex over genres).
pub fn aggregate_usattn(
    set: &SemanticSet,
    e_jk: &Array1<f64>,
    params: &SemanticAggregatorParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if set.vectors.is_empty() {
        return Err(Error::Semantics("semantic set is empty".into()));
    }
    let mut tape = Tape::new();
    let w_q = tape.leaf(params.w_q.clone());
    let w_k = tape.leaf(params.w_k.clone());
    let w_v = tape.leaf(params.w_v.clone());
    let e = tape.leaf(col(e_jk));
    let (s_jk, alphas) = tape_usattn(&mut tape, w_q, w_k, w_v, e, set);
    Ok((uncol(tape.value(s_jk)), uncol(tape.value(alphas))))
}

/// `S_k = n_genres * S_jk + E_jk`.
pub fn skip_connect(s_jk: &Array1<f64>, e_jk: &Array1<f64>, n_genres: usize) -> Result<Array1<f64>> {
    if s_jk.len() != e_jk.len() {
        return Err(Error::Shape("skip_connect: width mismatch".into()));
    }
    Ok(s_jk * n_genres as f64 + e_jk)
}

/// Square cosine-similarity matrix over the given tokens. A zero vector
/// gets similarity 0 off-diagonal and 1 on the diagonal, with a warning.
pub fn genre_similarity_matrix(
    table: &GenreEmbeddingTable,
    tokens: &[String],
) -> Result<Array2<f64>> {
    let mut vecs = Vec::with_capacity(tokens.len());
    for t in tokens {
        let v = table
            .get(t)
            .ok_or_else(|| Error::Semantics(format!("unknown genre token: {t}")))?;
        let norm = v.dot(v).sqrt();
        if norm == 0.0 {
            log::warn!("genre {t:?} has a zero embedding; defining its similarity as 0");
        }
        vecs.push((v.clone(), norm));
    }
    let n = tokens.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = if i == j {
                1.0
            } else if vecs[i].1 == 0.0 || vecs[j].1 == 0.0 {
                0.0
            } else {
                vecs[i].0.dot(&vecs[j].0) / (vecs[i].1 * vecs[j].1)
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn catalog_with_genres(genres: Vec<Vec<&str>>) -> NodeCatalog {
        let n = genres.len();
        NodeCatalog {
            user_names: vec!["u".into()],
            item_names: (0..n).map(|i| format!("i{i}")).collect(),
            user_features: vec![vec![0.0; 2]],
            item_features: vec![vec![0.0; 2]; n],
            item_genres: genres
                .into_iter()
                .map(|g| g.into_iter().map(String::from).collect())
                .collect(),
            d_v: 2,
            d_e: 1,
        }
    }

    fn identity_params(d: usize) -> SemanticAggregatorParams {
        SemanticAggregatorParams {
            w_s: Array2::eye(d),
            b_s: Array1::zeros(d),
            w_q: Array2::eye(d),
            w_k: Array2::eye(d),
            w_v: Array2::eye(d),
            w_u: Array2::eye(d),
            w_i: Array2::eye(d),
            b_ui: Array1::zeros(d),
        }
    }

    #[test]
    fn one_hot_encoding_gives_basis_vectors() {
        let catalog = catalog_with_genres(vec![vec!["drama"], vec!["action", "drama"]]);
        let table = GenreEmbeddingTable::one_hot(&catalog);
        assert_eq!(table.d_s(), 2);
        let sets = encode_genres(&catalog, &table).unwrap();
        // Vocabulary sorts to [action, drama], so drama -> [0, 1].
        assert_eq!(sets[0].vectors, vec![array![0.0, 1.0]]);
        assert_eq!(sets[1].n_genres(), 2);
        assert_eq!(sets[1].vectors[0], array![1.0, 0.0]);
    }

    #[test]
    fn table_mode_enforces_width_and_reports_unknown_tokens() {
        let text = "action 0.1 0.2 0.3\ndrama 0.4 0.5 0.6\n";
        let table = GenreEmbeddingTable::from_reader(text.as_bytes()).unwrap();
        assert_eq!(table.d_s(), 3);

        let bad = "a 1 2\nb 1 2 3\n";
        assert!(GenreEmbeddingTable::from_reader(bad.as_bytes()).is_err());

        let catalog = catalog_with_genres(vec![vec!["drama", "western"]]);
        let err = encode_genres(&catalog, &table).unwrap_err();
        assert!(err.to_string().contains("western"), "{err}");
    }

    #[test]
    fn sum_aggregator_hand_case() {
        let params = identity_params(2);
        let set = SemanticSet {
            item: 0,
            vectors: vec![array![1.0, -1.0], array![2.0, 3.0]],
        };
        let got = aggregate_sum(&set, &params).unwrap();
        assert_eq!(got, array![3.0, 3.0]);

        let single = SemanticSet { item: 0, vectors: vec![array![0.5, 0.2]] };
        assert_eq!(aggregate_sum(&single, &params).unwrap(), array![0.5, 0.2]);

        let zero = SemanticSet { item: 0, vectors: vec![Array1::zeros(2), Array1::zeros(2)] };
        assert_eq!(aggregate_sum(&zero, &params).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn sum_aggregator_rejects_shape_mismatch() {
        let params = identity_params(2);
        let set = SemanticSet { item: 0, vectors: vec![array![1.0, 2.0, 3.0]] };
        assert!(aggregate_sum(&set, &params).is_err());
    }

    #[test]
    fn user_specific_embedding_hand_case() {
        let params = identity_params(2);
        let got = user_specific_embedding(&array![1.0, -2.0], &array![0.0, 1.0], &params).unwrap();
        assert_eq!(got, array![1.0, -0.01]);

        let zero = user_specific_embedding(&array![0.0, 0.0], &array![0.0, 0.0], &params).unwrap();
        assert_eq!(zero, array![0.0, 0.0]);

        let mut biased = identity_params(2);
        biased.b_ui = array![5.0, 5.0];
        let got =
            user_specific_embedding(&array![0.0, 0.0], &array![0.0, 0.0], &biased).unwrap();
        assert_eq!(got, array![5.0, 5.0]);
    }

    #[test]
    fn usattn_softmax_cases() {
        // Scalar case with identity projections: logits {1, 0}.
        let params = identity_params(1);
        let set = SemanticSet { item: 0, vectors: vec![array![1.0], array![0.0]] };
        let (_, alphas) = aggregate_usattn(&set, &array![1.0], &params).unwrap();
        let e = std::f64::consts::E;
        assert!((alphas[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((alphas[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        // Singleton set: alpha = [1].
        let single = SemanticSet { item: 0, vectors: vec![array![3.0]] };
        let (s, alphas) = aggregate_usattn(&single, &array![1.0], &params).unwrap();
        assert_eq!(alphas, array![1.0]);
        assert_eq!(s, array![3.0]);

        // Identical genre vectors: uniform attention.
        let same = SemanticSet {
            item: 0,
            vectors: vec![array![2.0], array![2.0], array![2.0]],
        };
        let (_, alphas) = aggregate_usattn(&same, &array![1.0], &params).unwrap();
        for a in alphas.iter() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn usattn_alphas_form_a_simplex_under_random_params() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.random_range(1..5usize);
            let n = rng.random_range(1..6usize);
            let mut params = identity_params(d);
            params.w_q.mapv_inplace(|_| rng.random_range(-2.0..2.0));
            params.w_k.mapv_inplace(|_| rng.random_range(-2.0..2.0));
            let set = SemanticSet {
                item: 0,
                vectors: (0..n)
                    .map(|_| Array1::from_iter((0..d).map(|_| rng.random_range(-3.0..3.0))))
                    .collect(),
            };
            let e = Array1::from_iter((0..d).map(|_| rng.random_range(-3.0..3.0)));
            let (_, alphas) = aggregate_usattn(&set, &e, &params).unwrap();
            assert!((alphas.sum() - 1.0).abs() < 1e-6);
            assert!(alphas.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn sum_aggregation_is_permutation_invariant() {
        let params = identity_params(2);
        let a = SemanticSet {
            item: 0,
            vectors: vec![array![1.0, -1.0], array![2.0, 3.0], array![0.5, 0.0]],
        };
        let b = SemanticSet {
            item: 0,
            vectors: vec![array![0.5, 0.0], array![1.0, -1.0], array![2.0, 3.0]],
        };
        assert_eq!(aggregate_sum(&a, &params).unwrap(), aggregate_sum(&b, &params).unwrap());
    }

    #[test]
    fn skip_connect_cases() {
        let got = skip_connect(&array![1.0, 1.0], &array![0.5, 0.0], 2).unwrap();
        assert_eq!(got, array![2.5, 2.0]);
        let got = skip_connect(&array![1.5, 2.0], &array![0.0, 0.0], 3).unwrap();
        assert_eq!(got, array![4.5, 6.0]);
        // Pure residual.
        let got = skip_connect(&array![0.0, 0.0], &array![0.7, -0.2], 1).unwrap();
        assert_eq!(got, array![0.7, -0.2]);
    }

    #[test]
    fn similarity_matrix_cases() {
        let text = "a 1 0\nb 1 1\nzero 0 0\n";
        let table = GenreEmbeddingTable::from_reader(text.as_bytes()).unwrap();
        let m = genre_similarity_matrix(&table, &["a".into(), "b".into()]).unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        assert!((m[[0, 1]] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((m[[1, 0]] - m[[0, 1]]).abs() < 1e-15);

        let m = genre_similarity_matrix(&table, &["a".into(), "zero".into()]).unwrap();
        assert_eq!(m[[0, 1]], 0.0);
        assert_eq!(m[[1, 1]], 1.0);
    }

    #[test]
    fn one_hot_similarity_is_identity() {
        let catalog = catalog_with_genres(vec![vec!["a"], vec!["b"], vec!["c"]]);
        let table = GenreEmbeddingTable::one_hot(&catalog);
        let tokens: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let m = genre_similarity_matrix(&table, &tokens).unwrap();
        assert_eq!(m, Array2::<f64>::eye(3));
    }
}

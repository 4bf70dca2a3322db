//! Tape-based reverse-mode automatic differentiation over small dense
//! matrices.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! then propagates adjoints from a scalar loss back to every leaf. Values
//! are `Array2<f64>`; column vectors are `(d, 1)` matrices and scalars are
//! `(1, 1)`. The op set is exactly what the model forward passes need, no
//! more.

use ndarray::Array2;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// Elementwise product.
    Mul(VarId, VarId),
    MatMul(VarId, VarId),
    Scale(VarId, f64),
    /// Vertical concatenation; all inputs share a column count.
    Concat(Vec<VarId>),
    SliceRows { src: VarId, start: usize, len: usize },
    /// Sum of all entries, producing a `(1, 1)` scalar.
    Sum(VarId),
    Relu(VarId),
    LeakyRelu(VarId, f64),
    Tanh(VarId),
    Sigmoid(VarId),
    Gelu(VarId),
    Cos(VarId),
    Sin(VarId),
    Ln(VarId),
    /// Softmax over the entries of a column vector, with max subtraction.
    Softmax(VarId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation for later backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
    /// Smallest |preactivation| seen by any ReLU/LeakyReLU on this tape;
    /// used by gradient checking to detect proximity to a kink.
    min_kink_gap: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), min_kink_gap: f64::INFINITY }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from zero observed at any ReLU/LeakyReLU input.
    pub fn min_kink_gap(&self) -> f64 {
        self.min_kink_gap
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `(1, 1)` node.
    pub fn scalar(&self, id: VarId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    /// Inserts an input node. Leaves are the only nodes gradients are read
    /// from; constants are just leaves nobody queries.
    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Column-vector leaf from a slice.
    pub fn leaf_vec(&mut self, data: &[f64]) -> VarId {
        let v = Array2::from_shape_vec((data.len(), 1), data.to_vec()).expect("shape");
        self.leaf(v)
    }

    pub fn leaf_scalar(&mut self, x: f64) -> VarId {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn zeros(&mut self, rows: usize) -> VarId {
        self.leaf(Array2::zeros((rows, 1)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn concat(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.ncols(), cols, "concat: column mismatch");
            out.slice_mut(ndarray::s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, src: VarId, start: usize, len: usize) -> VarId {
        let v = self.value(src).slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { src, start, len })
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Inner product of two equally shaped nodes, as a `(1, 1)` scalar.
    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        for &x in self.nodes[a.0].value.iter() {
            self.min_kink_gap = self.min_kink_gap.min(x.abs());
        }
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        for &x in self.nodes[a.0].value.iter() {
            self.min_kink_gap = self.min_kink_gap.min(x.abs());
        }
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn cos(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn sin(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softmax(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "softmax expects a column vector");
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = x.mapv(|v| (v - max).exp());
        let total: f64 = exps.sum();
        self.push(exps / total, Op::Softmax(a))
    }

    /// Backpropagates from a scalar node, returning adjoints for every node.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash; callers may read adjoints of interior nodes too.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, &g * *c);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let slice = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        accumulate(&mut adj, *p, slice);
                        at += rows;
                    }
                }
                Op::SliceRows { src, start, len } => {
                    let mut full = Array2::zeros(self.nodes[src.0].value.dim());
                    full.slice_mut(ndarray::s![*start..start + len, ..]).assign(&g);
                    accumulate(&mut adj, *src, full);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, *a, &g * &mask);
                }
                Op::LeakyRelu(a, slope) => {
                    let mask =
                        self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    accumulate(&mut adj, *a, &g * &mask);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Gelu(a) => {
                    let d = self.nodes[a.0].value.mapv(gelu_grad_scalar);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Cos(a) => {
                    let d = self.nodes[a.0].value.mapv(|x| -x.sin());
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Sin(a) => {
                    let d = self.nodes[a.0].value.mapv(f64::cos);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Ln(a) => {
                    let d = self.nodes[a.0].value.mapv(|x| 1.0 / x);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Softmax(a) => {
                    // dx = y * (g - <y, g>)
                    let y = &node.value;
                    let inner: f64 = (y * &g).sum();
                    let ga = y * &(&g - inner);
                    accumulate(&mut adj, *a, ga);
                }
            }
            adj[i] = Some(g);
        }
        Gradients { adj }
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], id: VarId, g: Array2<f64>) {
    match &mut adj[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node; zero shape-`like` if the
    /// node did not influence the loss.
    pub fn get(&self, id: VarId, like: &Array2<f64>) -> Array2<f64> {
        match &self.adj[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(like.dim()),
        }
    }

    pub fn try_get(&self, id: VarId) -> Option<&Array2<f64>> {
        self.adj[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite difference of a scalar-valued builder with respect to
    /// one leaf, compared entrywise against the tape gradient.
    fn fd_check<F>(build: F, input: Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, VarId) -> VarId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x, &input);

        let eps = 1e-6;
        for r in 0..input.nrows() {
            for c in 0..input.ncols() {
                let mut plus = input.clone();
                plus[[r, c]] += eps;
                let mut minus = input.clone();
                minus[[r, c]] -= eps;
                let f = |v: Array2<f64>| {
                    let mut t = Tape::new();
                    let x = t.leaf(v);
                    let l = build(&mut t, x);
                    t.scalar(l)
                };
                let fd = (f(plus) - f(minus)) / (2.0 * eps);
                let a = analytic[[r, c]];
                assert!(
                    (a - fd).abs() <= tol * (1.0 + fd.abs()),
                    "grad mismatch at ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = tape.leaf(array![[5.0], [6.0]]);
        let y = tape.matmul(w, x);
        assert_eq!(tape.value(y), &array![[17.0], [39.0]]);
        let loss = tape.sum(y);
        let g = tape.backward(loss);
        assert_eq!(g.get(w, &array![[0.0, 0.0], [0.0, 0.0]]), array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(g.get(x, &array![[0.0], [0.0]]), array![[4.0], [6.0]]);
    }

    #[test]
    fn fd_elementwise_ops() {
        let input = array![[0.3], [-0.7], [1.9]];
        fd_check(|t, x| { let y = t.tanh(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.sigmoid(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.gelu(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.cos(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.sin(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.relu(x); t.sum(y) }, input.clone(), 1e-6);
        fd_check(|t, x| { let y = t.leaky_relu(x, 0.01); t.sum(y) }, input, 1e-6);
    }

    #[test]
    fn fd_softmax_and_compounds() {
        let input = array![[0.2], [1.1], [-0.4]];
        fd_check(
            |t, x| {
                let s = t.softmax(x);
                let w = t.leaf_vec(&[0.5, -1.0, 2.0]);
                t.dot(s, w)
            },
            input.clone(),
            1e-6,
        );
        fd_check(
            |t, x| {
                let a = t.slice_rows(x, 0, 2);
                let b = t.slice_rows(x, 1, 2);
                let c = t.concat(&[a, b]);
                let m = t.mul(c, c);
                t.sum(m)
            },
            input,
            1e-6,
        );
    }

    #[test]
    fn fd_ln_positive_domain() {
        let input = array![[0.4], [1.5]];
        fd_check(|t, x| { let y = t.ln(x); t.sum(y) }, input, 1e-6);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[1000.0, 1001.0, 999.0]);
        let s = tape.softmax(x);
        let total: f64 = tape.value(s).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(tape.value(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kink_gap_tracks_relu_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[0.5, -0.003, 2.0]);
        let _ = tape.relu(x);
        assert!((tape.min_kink_gap() - 0.003).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[1.0, 2.0]);
        let unused = tape.leaf_vec(&[3.0]);
        let loss = tape.sum(x);
        let g = tape.backward(loss);
        assert_eq!(g.get(unused, &Array2::zeros((1, 1))), Array2::<f64>::zeros((1, 1)));
        assert!(g.try_get(unused).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = <x, x> => grad = 2x
        let mut tape = Tape::new();
        let x = tape.leaf_vec(&[1.0, -2.0, 3.0]);
        let loss = tape.dot(x, x);
        let g = tape.backward(loss);
        assert_eq!(g.get(x, &Array2::zeros((3, 1))), array![[2.0], [-4.0], [6.0]]);
    }
}

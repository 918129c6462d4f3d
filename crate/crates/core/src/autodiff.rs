//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; node ids are
//! only ever created by the tape, so ids always reference earlier nodes
//! and a single reverse sweep visits the graph in topological order.
//! Batch structure (sequences, heads) is encoded by row blocking: a batch
//! of `B` token sequences of length `T` travels as one `(B*T) x d` tensor,
//! and [`Tape::attention`] applies softmax-attention block-diagonally so
//! tokens never attend across sequence boundaries.
//!
//! The op set is exactly what the encoder/head/loss stack needs — no
//! broadcasting rules, no shape inference. Every op asserts its shapes on
//! the spot; a violated assertion is a caller bug, not a runtime error.
//!
//! Gradients flow into parameter slots: leaves registered through
//! [`Tape::param`] carry a slot index, and [`Tape::backward`] accumulates
//! `d(root)/d(param)` into the matching entry of the gradient list the
//! caller provides. Everything is generic over [`Scalar`] so the same
//! graph code runs in `f32` for training and `f64` for finite-difference
//! verification.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    /// a @ b
    Matmul(NodeId, NodeId),
    /// a @ b^T
    MatmulT(NodeId, NodeId),
    /// x + bias, bias is 1 x n broadcast down the rows
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    /// x * k + c, elementwise with constants; the shift vanishes from
    /// the gradient so only the gain is kept
    Affine(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Recip(NodeId),
    /// x * s, s is a 1x1 node broadcast everywhere
    MulScalar(NodeId, NodeId),
    /// per-row layer norm with learned gain/bias (1 x n params)
    LayerNorm(NodeId, NodeId, NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Transpose(NodeId),
    /// diagonal of a square matrix as an m x 1 column
    GatherDiag(NodeId),
    /// block-diagonal multi-head softmax attention
    Attention { q: NodeId, k: NodeId, v: NodeId, seqs: usize, heads: usize },
    MeanAll(NodeId),
}

/// Saved forward-pass byproducts that make backward cheap and exact.
#[derive(Debug, Clone)]
enum Aux<S> {
    None,
    /// per-row (mean, 1/std)
    LayerNorm(Vec<(S, S)>),
    /// per-row 1/norm
    L2Norm(Vec<S>),
    /// softmax probabilities per (sequence, head), each T x T
    Attention(Vec<Tensor<S>>),
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    aux: Aux<S>,
}

const LN_EPS: f64 = 1e-5;
const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<S>, aux: Aux<S>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Input, t, Aux::None)
    }

    /// Parameter leaf; `backward` accumulates its gradient into slot
    /// `slot` of the gradient list.
    pub fn param(&mut self, slot: usize, value: Tensor<S>) -> NodeId {
        self.push(Op::Param(slot), value, Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v, Aux::None)
    }

    /// `a @ b^T` without materializing the transpose on the caller side.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bt = self.value(b).transpose();
        let v = self.value(a).matmul(&bt);
        self.push(Op::MatmulT(a, b), v, Aux::None)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(bv.cols(), xv.cols(), "bias width must match");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += *b;
            }
        }
        self.push(Op::AddRowBias(x, bias), out, Aux::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v, Aux::None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), S::of_f64(-1.0));
        self.push(Op::Sub(a, b), v, Aux::None)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise mul shapes must match");
        let data = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(Op::MulElem(a, b), v, Aux::None)
    }

    /// `x * k + c` elementwise.
    pub fn affine(&mut self, x: NodeId, k: f64, c: f64) -> NodeId {
        let (ks, cs) = (S::of_f64(k), S::of_f64(c));
        let xv = self.value(x);
        let data = xv.iter().map(|&v| v * ks + cs).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Affine(x, k), v, Aux::None)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.affine(x, k, 0.0)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (a, b) = (S::of_f64(GELU_A), S::of_f64(GELU_B));
        let half = S::of_f64(0.5);
        let xv = self.value(x);
        let data = xv
            .iter()
            .map(|&v| {
                let t = (a * (v + b * v * v * v)).tanh();
                half * v * (S::one() + t)
            })
            .collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Gelu(x), v, Aux::None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.iter().map(|&v| v.tanh()).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Tanh(x), v, Aux::None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Sigmoid(x), v, Aux::None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.iter().map(|&v| v.exp()).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Exp(x), v, Aux::None)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.iter().map(|&v| S::one() / v).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::Recip(x), v, Aux::None)
    }

    /// Multiply every entry of `x` by the single value of `s` (1x1).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1), "scalar factor must be 1x1");
        let sv = self.value(s).item();
        let xv = self.value(x);
        let data = xv.iter().map(|&v| v * sv).collect();
        let v = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(Op::MulScalar(x, s), v, Aux::None)
    }

    /// Per-row layer normalization followed by learned gain and bias
    /// (`gamma`, `beta` are 1 x n parameters).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.cols();
        assert_eq!(self.value(gamma).shape(), (1, n), "gamma must be 1 x n");
        assert_eq!(self.value(beta).shape(), (1, n), "beta must be 1 x n");
        let inv_n = S::of_f64(1.0 / n as f64);
        let eps = S::of_f64(LN_EPS);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rstd = S::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            let g = self.nodes[gamma.0].value.row(0);
            let b = self.nodes[beta.0].value.row(0);
            for c in 0..n {
                out.set(r, c, (row[c] - mean) * rstd * g[c] + b[c]);
            }
        }
        self.push(Op::LayerNorm(x, gamma, beta), out, Aux::LayerNorm(stats))
    }

    /// Numerically stabilized log-softmax across each row.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().fold(S::neg_infinity(), |a, &v| if v > a { v } else { a });
            let lse = row.iter().fold(S::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            for c in 0..xv.cols() {
                out.set(r, c, row[c] - lse);
            }
        }
        self.push(Op::LogSoftmaxRows(x), out, Aux::None)
    }

    /// Scale each row to unit Euclidean norm (plus a tiny epsilon under
    /// the square root so zero rows stay finite).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let eps = S::of_f64(1e-12);
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let norm = (row.iter().fold(S::zero(), |a, &v| a + v * v) + eps).sqrt();
            let k = S::one() / norm;
            inv.push(k);
            for c in 0..xv.cols() {
                out.set(r, c, row[c] * k);
            }
        }
        self.push(Op::L2NormalizeRows(x), out, Aux::L2Norm(inv))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols row counts must match");
        let mut out = Tensor::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            out.row_mut(r)[..av.cols()].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols()..].copy_from_slice(bv.row(r));
        }
        self.push(Op::ConcatCols(a, b), out, Aux::None)
    }

    /// Vertically stack nodes of equal width.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "stack_rows widths must match");
            for r in 0..pv.rows() {
                out.row_mut(at + r).copy_from_slice(pv.row(r));
            }
            at += pv.rows();
        }
        self.push(Op::StackRows(parts.to_vec()), out, Aux::None)
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(Op::GatherRows(x, idx.to_vec()), out, Aux::None)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(Op::Transpose(x), v, Aux::None)
    }

    /// Diagonal of a square matrix as an m x 1 column.
    pub fn gather_diag(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), xv.cols(), "gather_diag needs a square matrix");
        let mut out = Tensor::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            out.set(r, 0, xv.get(r, r));
        }
        self.push(Op::GatherDiag(x), out, Aux::None)
    }

    /// Multi-head softmax attention over `seqs` independent sequences.
    ///
    /// `q`, `k`, `v` are `(seqs*T) x d` with `d` divisible by `heads`;
    /// rows `[s*T, (s+1)*T)` form sequence `s`. Scores are scaled by
    /// `1/sqrt(d/heads)`; attention never crosses sequence boundaries.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, seqs: usize, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape(), kv.shape(), "q/k shapes must match");
        assert_eq!(qv.shape(), vv.shape(), "q/v shapes must match");
        let d = qv.cols();
        assert_eq!(d % heads, 0, "embed dim must divide into heads");
        assert_eq!(qv.rows() % seqs, 0, "rows must divide into sequences");
        let t = qv.rows() / seqs;
        let dh = d / heads;
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());

        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(seqs * heads);
        let mut qb = Tensor::zeros(t, dh);
        let mut kb = Tensor::zeros(t, dh);
        let mut vb = Tensor::zeros(t, dh);
        for s in 0..seqs {
            for h in 0..heads {
                copy_block(qv, s * t, h * dh, &mut qb);
                copy_block(kv, s * t, h * dh, &mut kb);
                copy_block(vv, s * t, h * dh, &mut vb);
                let mut scores = qb.matmul(&kb.transpose());
                scores.scale(scale);
                // softmax per row, stabilized
                for r in 0..t {
                    let row = scores.row_mut(r);
                    let max = row.iter().fold(S::neg_infinity(), |a, &x| if x > a { x } else { a });
                    let mut sum = S::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    let inv = S::one() / sum;
                    for x in row.iter_mut() {
                        *x *= inv;
                    }
                }
                let ob = scores.matmul(&vb);
                paste_block(&mut out, s * t, h * dh, &ob, false);
                probs.push(scores);
            }
        }
        self.push(Op::Attention { q, k, v, seqs, heads }, out, Aux::Attention(probs))
    }

    /// Mean over every entry, as a 1x1 node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let inv = S::of_f64(1.0 / xv.len() as f64);
        let sum = xv.iter().fold(S::zero(), |a, &v| a + v);
        self.push(Op::MeanAll(x), Tensor::scalar(sum * inv), Aux::None)
    }

    /// Reverse sweep from a 1x1 `root`, accumulating parameter gradients
    /// into `param_grads` (indexed by the slot passed to [`Tape::param`],
    /// shapes must match the parameter values).
    pub fn backward(&self, root: NodeId, param_grads: &mut [Tensor<S>]) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(S::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    assert_eq!(
                        param_grads[*slot].shape(),
                        node.value.shape(),
                        "gradient slot {slot} shape mismatch"
                    );
                    param_grads[*slot].add_assign(&g);
                }
                Op::Matmul(a, b) => {
                    // dA = g @ B^T ; dB = A^T @ g
                    let bt = self.value(*b).transpose();
                    accumulate(&mut grads, *a, g.matmul(&bt));
                    let at = self.value(*a).transpose();
                    accumulate(&mut grads, *b, at.matmul(&g));
                }
                Op::MatmulT(a, b) => {
                    // y = A @ B^T: dA = g @ B ; dB = g^T @ A
                    accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    accumulate(&mut grads, *b, g.transpose().matmul(self.value(*a)));
                }
                Op::AddRowBias(x, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let mut gb = g;
                    gb.scale(S::of_f64(-1.0));
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulElem(a, b) => {
                    let ga = elementwise_mul(&g, self.value(*b));
                    let gb = elementwise_mul(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine(x, k) => {
                    let mut gx = g;
                    gx.scale(S::of_f64(*k));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let (a, b) = (S::of_f64(GELU_A), S::of_f64(GELU_B));
                    let (half, three) = (S::of_f64(0.5), S::of_f64(3.0));
                    let xv = self.value(*x);
                    let data = xv
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| {
                            let u = a * (v + b * v * v * v);
                            let t = u.tanh();
                            let du = a * (S::one() + three * b * v * v);
                            let d = half * (S::one() + t) + half * v * (S::one() - t * t) * du;
                            gv * d
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
                }
                Op::Tanh(x) => {
                    let yv = &node.value;
                    let data = yv
                        .iter()
                        .zip(g.iter())
                        .map(|(&y, &gv)| gv * (S::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(yv.rows(), yv.cols(), data));
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    let data = yv
                        .iter()
                        .zip(g.iter())
                        .map(|(&y, &gv)| gv * y * (S::one() - y))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(yv.rows(), yv.cols(), data));
                }
                Op::Exp(x) => {
                    let gx = elementwise_mul(&g, &node.value);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Recip(x) => {
                    let yv = &node.value;
                    let data = yv
                        .iter()
                        .zip(g.iter())
                        .map(|(&y, &gv)| -gv * y * y)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(yv.rows(), yv.cols(), data));
                }
                Op::MulScalar(x, s) => {
                    let sv = self.value(*s).item();
                    let mut gx = g.clone();
                    gx.scale(sv);
                    accumulate(&mut grads, *x, gx);
                    let dot = g
                        .iter()
                        .zip(self.value(*x).iter())
                        .fold(S::zero(), |acc, (&gv, &xv)| acc + gv * xv);
                    accumulate(&mut grads, *s, Tensor::scalar(dot));
                }
                Op::LayerNorm(x, gamma, beta) => {
                    let Aux::LayerNorm(stats) = &node.aux else { unreachable!() };
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let n = xv.cols();
                    let inv_n = S::of_f64(1.0 / n as f64);
                    let mut gx = Tensor::zeros(xv.rows(), n);
                    let mut ggamma = Tensor::zeros(1, n);
                    let mut gbeta = Tensor::zeros(1, n);
                    for r in 0..xv.rows() {
                        let (mean, rstd) = stats[r];
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        // xhat and the two row reductions
                        let mut dot1 = S::zero(); // mean of gxhat
                        let mut dot2 = S::zero(); // mean of gxhat * xhat
                        for c in 0..n {
                            let xhat = (xrow[c] - mean) * rstd;
                            let gxhat = grow[c] * gv.get(0, c);
                            dot1 += gxhat;
                            dot2 += gxhat * xhat;
                            ggamma.row_mut(0)[c] += grow[c] * xhat;
                            gbeta.row_mut(0)[c] += grow[c];
                        }
                        dot1 *= inv_n;
                        dot2 *= inv_n;
                        for c in 0..n {
                            let xhat = (xrow[c] - mean) * rstd;
                            let gxhat = grow[c] * gv.get(0, c);
                            gx.set(r, c, rstd * (gxhat - dot1 - xhat * dot2));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::LogSoftmaxRows(x) => {
                    // y = log softmax: dx = g - softmax * rowsum(g)
                    let yv = &node.value;
                    let mut gx = Tensor::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let gsum = g.row(r).iter().fold(S::zero(), |a, &v| a + v);
                        for c in 0..yv.cols() {
                            let sm = yv.get(r, c).exp();
                            gx.set(r, c, g.get(r, c) - sm * gsum);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows(x) => {
                    let Aux::L2Norm(inv) = &node.aux else { unreachable!() };
                    let yv = &node.value;
                    let mut gx = Tensor::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let dot = g
                            .row(r)
                            .iter()
                            .zip(yv.row(r))
                            .fold(S::zero(), |a, (&gv, &y)| a + gv * y);
                        for c in 0..yv.cols() {
                            gx.set(r, c, (g.get(r, c) - yv.get(r, c) * dot) * inv[r]);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let mut ga = Tensor::zeros(g.rows(), ac);
                    let mut gb = Tensor::zeros(g.rows(), g.cols() - ac);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut gp = Tensor::zeros(rows, g.cols());
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(g.row(at + r));
                        }
                        accumulate(&mut grads, p, gp);
                        at += rows;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::GatherDiag(x) => {
                    let n = self.value(*x).rows();
                    let mut gx = Tensor::zeros(n, n);
                    for r in 0..n {
                        gx.set(r, r, g.get(r, 0));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, seqs, heads } => {
                    let Aux::Attention(probs) = &node.aux else { unreachable!() };
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let t = qv.rows() / seqs;
                    let dh = d / heads;
                    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
                    let mut gq = Tensor::zeros(qv.rows(), d);
                    let mut gk = Tensor::zeros(qv.rows(), d);
                    let mut gv_out = Tensor::zeros(qv.rows(), d);
                    let mut qb = Tensor::zeros(t, dh);
                    let mut kb = Tensor::zeros(t, dh);
                    let mut vb = Tensor::zeros(t, dh);
                    let mut gb = Tensor::zeros(t, dh);
                    for s in 0..*seqs {
                        for h in 0..*heads {
                            let p = &probs[s * heads + h];
                            copy_block(qv, s * t, h * dh, &mut qb);
                            copy_block(kv, s * t, h * dh, &mut kb);
                            copy_block(vv, s * t, h * dh, &mut vb);
                            copy_block(&g, s * t, h * dh, &mut gb);
                            // out = P @ V
                            let gvb = p.transpose().matmul(&gb);
                            let gp = gb.matmul(&vb.transpose());
                            // softmax backward: gS = P o (gP - rowsum(gP o P))
                            let mut gs = Tensor::zeros(t, t);
                            for r in 0..t {
                                let dot = gp
                                    .row(r)
                                    .iter()
                                    .zip(p.row(r))
                                    .fold(S::zero(), |a, (&x, &y)| a + x * y);
                                for c in 0..t {
                                    gs.set(r, c, p.get(r, c) * (gp.get(r, c) - dot));
                                }
                            }
                            gs.scale(scale);
                            let gqb = gs.matmul(&kb);
                            let gkb = gs.transpose().matmul(&qb);
                            paste_block(&mut gq, s * t, h * dh, &gqb, true);
                            paste_block(&mut gk, s * t, h * dh, &gkb, true);
                            paste_block(&mut gv_out, s * t, h * dh, &gvb, true);
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv_out);
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let gs = g.item() * S::of_f64(1.0 / xv.len() as f64);
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), gs));
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise_mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Copy the `out.rows() x out.cols()` block of `src` starting at
/// (`row0`, `col0`) into `out`.
fn copy_block<S: Scalar>(src: &Tensor<S>, row0: usize, col0: usize, out: &mut Tensor<S>) {
    let (h, w) = out.shape();
    for r in 0..h {
        let s = &src.row(row0 + r)[col0..col0 + w];
        out.row_mut(r).copy_from_slice(s);
    }
}

/// Write (or add) `block` into `dst` at (`row0`, `col0`).
fn paste_block<S: Scalar>(dst: &mut Tensor<S>, row0: usize, col0: usize, block: &Tensor<S>, add: bool) {
    let (h, w) = block.shape();
    for r in 0..h {
        let d = &mut dst.row_mut(row0 + r)[col0..col0 + w];
        if add {
            for (o, v) in d.iter_mut().zip(block.row(r)) {
                *o += *v;
            }
        } else {
            d.copy_from_slice(block.row(r));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check scaffold: `build` assembles a scalar loss
    /// from parameter leaves whose initial values come from `inits`; the
    /// analytic gradient of every parameter coordinate is compared
    /// against a central difference in f64.
    fn fd_check(inits: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) {
        let loss_of = |vals: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> =
                vals.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
            let root = build(&mut tape, &ids);
            tape.value(root).item()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> =
            inits.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let root = build(&mut tape, &ids);
        let mut grads: Vec<Tensor<f64>> =
            inits.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        tape.backward(root, &mut grads);

        let eps = 1e-5;
        for (pi, init) in inits.iter().enumerate() {
            for j in 0..init.len() {
                let mut plus = inits.to_vec();
                plus[pi].data_mut()[j] += eps;
                let mut minus = inits.to_vec();
                minus[pi].data_mut()[j] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = grads[pi].data()[j];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                // tiny absolute escape hatch for fd truncation noise on
                // near-zero gradients
                assert!(
                    (fd - an).abs() < 1e-9 || (fd - an).abs() / denom < 1e-6,
                    "param {pi} coord {j}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_bias_gelu_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inits = vec![randn(&mut rng, 3, 4), randn(&mut rng, 4, 5), randn(&mut rng, 1, 5)];
        fd_check(&inits, &|tape, p| {
            let h = tape.matmul(p[0], p[1]);
            let h = tape.add_row_bias(h, p[2]);
            let h = tape.gelu(h);
            let sq = tape.mul_elem(h, h);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inits = vec![randn(&mut rng, 4, 6), randn(&mut rng, 1, 6), randn(&mut rng, 1, 6)];
        fd_check(&inits, &|tape, p| {
            let y = tape.layer_norm(p[0], p[1], p[2]);
            let sq = tape.mul_elem(y, y);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 2 sequences of 3 tokens, d=4, 2 heads
        let inits = vec![randn(&mut rng, 6, 4), randn(&mut rng, 6, 4), randn(&mut rng, 6, 4)];
        fd_check(&inits, &|tape, p| {
            let y = tape.attention(p[0], p[1], p[2], 2, 2);
            let sq = tape.mul_elem(y, y);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn softmax_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inits = vec![randn(&mut rng, 5, 5), Tensor::scalar(-2.0)];
        fd_check(&inits, &|tape, p| {
            // temperature-scaled diagonal log-softmax, both directions
            let tau = tape.exp(p[1]);
            let inv = tape.recip(tau);
            let logits = tape.mul_scalar(p[0], inv);
            let rows = tape.log_softmax_rows(logits);
            let rd = tape.gather_diag(rows);
            let lt = tape.transpose(logits);
            let cols = tape.log_softmax_rows(lt);
            let cd = tape.gather_diag(cols);
            let sum = tape.add(rd, cd);
            let neg = tape.scale(sum, -1.0);
            tape.mean_all(neg)
        });
    }

    #[test]
    fn normalize_concat_gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inits = vec![randn(&mut rng, 4, 3), randn(&mut rng, 4, 2)];
        fd_check(&inits, &|tape, p| {
            let n = tape.l2_normalize_rows(p[0]);
            let c = tape.concat_cols(n, p[1]);
            let g = tape.gather_rows(c, &[0, 2, 2, 3]);
            let s = tape.stack_rows(&[g, c]);
            let t = tape.tanh(s);
            let sq = tape.mul_elem(t, t);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn scalar_and_activation_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inits = vec![randn(&mut rng, 3, 3), randn(&mut rng, 3, 3)];
        fd_check(&inits, &|tape, p| {
            let s = tape.sigmoid(p[0]);
            let e = tape.exp(p[1]);
            let m = tape.mul_elem(s, e);
            let a = tape.affine(m, 1.7, -0.3);
            let d = tape.sub(a, p[0]);
            let sq = tape.mul_elem(d, d);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 5, 3);
        let mut tape: Tape<f64> = Tape::new();
        let pa = tape.input(a.clone());
        let pb = tape.input(b.clone());
        let y1 = tape.matmul_t(pa, pb);
        let bt = tape.input(b.transpose());
        let y2 = tape.matmul(pa, bt);
        assert_eq!(tape.value(y1), tape.value(y2));
        // and its gradient path
        let inits = vec![a, b];
        fd_check(&inits, &|tape, p| {
            let y = tape.matmul_t(p[0], p[1]);
            let sq = tape.mul_elem(y, y);
            tape.mean_all(sq)
        });
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        // f(x) = mean(x o x) + mean(x): both paths feed the same leaf.
        let x = Tensor::from_vec(2, 2, vec![1.0f64, -2.0, 0.5, 3.0]);
        let mut tape = Tape::new();
        let p = tape.param(0, x.clone());
        let sq = tape.mul_elem(p, p);
        let m1 = tape.mean_all(sq);
        let m2 = tape.mean_all(p);
        let sum = tape.add(m1, m2);
        let mut grads = vec![Tensor::zeros(2, 2)];
        tape.backward(sum, &mut grads);
        for j in 0..4 {
            let want = 2.0 * x.data()[j] / 4.0 + 0.25;
            assert!((grads[0].data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_block_diagonal_across_sequences() {
        // Changing sequence 1's tokens must not change sequence 0's output.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = randn(&mut rng, 6, 4);
        let mut other = base.clone();
        for v in other.data_mut()[12..].iter_mut() {
            *v += 1.0; // rows 3..6 = sequence 1
        }
        let run = |x: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let p = tape.input(x.clone());
            let y = tape.attention(p, p, p, 2, 2);
            tape.value(y).clone()
        };
        let (ya, yb) = (run(&base), run(&other));
        for r in 0..3 {
            assert_eq!(ya.row(r), yb.row(r), "sequence 0 row {r} changed");
        }
        assert_ne!(ya.row(3), yb.row(3));
    }

    #[test]
    fn log_softmax_rows_are_normalized_and_stable() {
        let x = Tensor::from_vec(2, 3, vec![1000.0f64, 1001.0, 999.0, -5.0, 0.0, 5.0]);
        let mut tape = Tape::new();
        let p = tape.input(x);
        let y = tape.log_softmax_rows(p);
        for r in 0..2 {
            let sum: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            assert!(tape.value(y).row(r).iter().all(|v| v.is_finite()));
        }
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever the backward pass needs. Graphs are cheap and short-lived: one
//! per sample, so samples can be differentiated independently and their
//! gradients summed in a fixed order.

use std::collections::HashMap;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    Transpose { a: Var, d0: usize, d1: usize },
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, out: [usize; 3], cols: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    pub params: Grads,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn head_block(x: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn add_head_block(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for p in 0..dh {
            dst[r * d + h * dh + p] += src[r * dh + p];
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is kept, for inspecting sensitivities.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a node; frozen parameters do not require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires_grad = self.params.is_trainable(id);
        self.nodes.push(Node { value: self.params.get(id).clone(), op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_t inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise operands differ in size");
        Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds the single row `r: [1, n]` to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(r).len(), n, "row broadcast width");
        let row = self.value(r).data();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(row).for_each(|(x, b)| *x += b);
        }
        self.push(t, Op::AddRow(a, r), &[a, r])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let n = t.cols();
        t.data_mut().chunks_mut(n).for_each(softmax_in_place);
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalisation with learned scale and shift `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (m, n) = self.dims2(x);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Scaled dot-product attention with `heads` heads. `q: [n, d]`,
    /// `k, v: [m, d]`. With `causal`, query `i` sees keys `j ≤ i + m − n`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (n, d) = self.dims2(q);
        let (m, dk) = self.dims2(k);
        assert_eq!(d, dk);
        assert_eq!(self.dims2(v), (m, d));
        assert!(heads > 0 && d % heads == 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = m as isize - n as isize;
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let qh = head_block(self.value(q).data(), n, d, h, dh);
            let kh = head_block(self.value(k).data(), m, d, h, dh);
            let vh = head_block(self.value(v).data(), m, d, h, dh);
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(n, dh, m, &qh, false, &kh, true, p, 0.0);
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if causal && j as isize > i as isize + offset { f64::NEG_INFINITY } else { *x * scale };
                }
                softmax_in_place(row);
            }
            let mut oh = vec![0.0; n * dh];
            gemm(n, m, dh, p, false, &vh, false, &mut oh, 0.0);
            add_head_block(&mut out, &oh, n, d, h, dh);
        }
        self.push(Tensor::new(vec![n, d], out), Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert!(start + len <= t.rows());
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(shape, data), Op::SliceRows { a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows widths differ");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::new(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        self.swap_axes(a, m, n)
    }

    /// Views `a` as `[d0, d1, rest]` and swaps the first two axes, giving
    /// `[d1, d0, rest...]`; for 2D inputs this is the matrix transpose.
    pub fn swap_axes(&mut self, a: Var, d0: usize, d1: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len() % (d0 * d1), 0, "swap_axes extents");
        let inner = t.len() / (d0 * d1);
        let src = t.data();
        let mut data = vec![0.0; t.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let from = (i * d1 + j) * inner;
                let to = (j * d0 + i) * inner;
                data[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let shape = match t.shape() {
            [a0, a1, rest @ ..] if *a0 == d0 && *a1 == d1 => [&[d1, d0][..], rest].concat(),
            _ if inner == 1 => vec![d1, d0],
            _ => vec![d1, d0, inner],
        };
        self.push(Tensor::new(shape, data), Op::Transpose { a, d0, d1 }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Rows of `table` selected by `ids` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < t.rows(), "row {i} out of range for table of {}", t.rows());
            data.extend_from_slice(t.row_slice(i));
        }
        self.push(Tensor::new(vec![ids.len(), c], data), Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x / m as f64);
        }
        self.push(Tensor::new(vec![1, n], out), Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Convolution of `x: [C, D, H, W]` with filters `w: [O, C·kd·kh·kw]`
    /// and bias `b: [1, O]`, giving `[O, D', H', W']`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.value(x).len(), geom.in_len(), "conv input size");
        let out = geom.out_dims().expect("kernel fits input; checked at configuration");
        let n_out: usize = out.iter().product();
        let k = geom.patch_len();
        let (o, k2) = self.dims2(w);
        assert_eq!(k, k2, "conv filter width");
        let cols = im2col(self.value(x).data(), &geom, out);
        let mut y = vec![0.0; o * n_out];
        gemm(o, k, n_out, self.value(w).data(), false, &cols, false, &mut y, 0.0);
        let bias = self.value(b).data();
        for (row, &bv) in y.chunks_mut(n_out).zip(bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(vec![o, out[0], out[1], out[2]], y);
        self.push(t, Op::Conv { x, w, b, geom, out, cols }, &[x, w, b])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len());
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, &[logits])
    }

    /// Mean categorical cross-entropy over the rows of `logits: [T, V]`
    /// where `mask` is true; masked-out rows contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let (t, v) = self.dims2(logits);
        assert_eq!(targets.len(), t);
        assert_eq!(mask.len(), t);
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            softmax_in_place(row);
            if mask[r] {
                loss -= row[targets[r]].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        assert!(count > 0, "cross entropy over an empty mask");
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count };
        self.push(Tensor::scalar(loss / count as f64), op, &[logits])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Grads::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Gradients { params, nodes: grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut Grads) {
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims2(a);
                let n = node.value.cols();
                if self.needs(a) {
                    let da = acc!(a);
                    gemm(m, n, k, g, false, val(b), !trans_b, da, 1.0);
                }
                if self.needs(b) {
                    let db = acc!(b);
                    if trans_b {
                        gemm(n, m, k, g, true, val(a), false, db, 1.0);
                    } else {
                        gemm(k, m, n, val(a), true, g, false, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::AddRow(a, r) => {
                if self.needs(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.needs(r) {
                    let dr = acc!(r);
                    let n = dr.len();
                    for row in g.chunks(n) {
                        dr.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let (da, vb) = (acc!(a), val(b));
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if self.needs(b) {
                    let (db, va) = (acc!(b), val(a));
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                acc!(a).iter_mut().zip(g).for_each(|(d, x)| *d += x * s);
            }
            &Op::Relu(a) => {
                let (da, y) = (acc!(a), node.value.data());
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let (da, y) = (acc!(a), node.value.data());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            &Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let da = acc!(a);
                for ((dr, yr), gr) in da.chunks_mut(n).zip(node.value.data().chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dr[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = self.dims2(*x);
                let gv = val(*gamma);
                if self.needs(*gamma) {
                    let dg = acc!(*gamma);
                    for i in 0..m * n {
                        dg[i % n] += g[i] * xhat[i];
                    }
                }
                if self.needs(*beta) {
                    let db = acc!(*beta);
                    for i in 0..m * n {
                        db[i % n] += g[i];
                    }
                }
                if self.needs(*x) {
                    let dx = acc!(*x);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dxhat: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] +=
                                inv_std[r] / n as f64 * (n as f64 * dxhat[c] - sum - xhat[r * n + c] * dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (n, d) = self.dims2(q);
                let m = self.dims2(k).0;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                for h in 0..heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    let qh = head_block(val(q), n, d, h, dh);
                    let kh = head_block(val(k), m, d, h, dh);
                    let vh = head_block(val(v), m, d, h, dh);
                    let go = head_block(g, n, d, h, dh);
                    let mut dvh = vec![0.0; m * dh];
                    gemm(m, n, dh, p, true, &go, false, &mut dvh, 0.0);
                    let mut dp = vec![0.0; n * m];
                    gemm(n, dh, m, &go, false, &vh, true, &mut dp, 0.0);
                    for i in 0..n {
                        let (pr, dr) = (&p[i * m..(i + 1) * m], &mut dp[i * m..(i + 1) * m]);
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; n * dh];
                    gemm(n, m, dh, &dp, false, &kh, false, &mut dqh, 0.0);
                    let mut dkh = vec![0.0; m * dh];
                    gemm(m, n, dh, &dp, true, &qh, false, &mut dkh, 0.0);
                    add_head_block(&mut dq, &dqh, n, d, h, dh);
                    add_head_block(&mut dk, &dkh, m, d, h, dh);
                    add_head_block(&mut dv, &dvh, m, d, h, dh);
                }
                for (var, gr) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(var) {
                        acc!(var).iter_mut().zip(&gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let c = self.nodes[a.0].value.cols();
                let da = acc!(a);
                da[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.needs(p) {
                        acc!(p).iter_mut().zip(&g[offset..offset + len]).for_each(|(d, x)| *d += x);
                    }
                    offset += len;
                }
            }
            &Op::Transpose { a, d0, d1 } => {
                let inner = g.len() / (d0 * d1);
                let da = acc!(a);
                for i in 0..d0 {
                    for j in 0..d1 {
                        let from = (i * d1 + j) * inner;
                        let to = (j * d0 + i) * inner;
                        da[from..from + inner].iter_mut().zip(&g[to..to + inner]).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Reshape(a) => {
                acc!(a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Gather { table, ids } => {
                let c = self.nodes[table.0].value.cols();
                let dt = acc!(*table);
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, x)| *d += x);
                }
            }
            &Op::MeanRows(a) => {
                let (m, n) = self.dims2(a);
                let da = acc!(a);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c] / m as f64;
                    }
                }
            }
            &Op::SumAll(a) => {
                acc!(a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Conv { x, w, b, geom, out, cols } => {
                let n_out: usize = out.iter().product();
                let k = geom.patch_len();
                let o = self.dims2(*w).0;
                if self.needs(*w) {
                    gemm(o, n_out, k, g, false, cols, true, acc!(*w), 1.0);
                }
                if self.needs(*b) {
                    let db = acc!(*b);
                    for (r, row) in g.chunks(n_out).enumerate() {
                        db[r] += row.iter().sum::<f64>();
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; k * n_out];
                    gemm(k, o, n_out, val(*w), true, g, false, &mut dcols, 0.0);
                    col2im(&dcols, geom, *out, acc!(*x));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = val(*logits);
                let n = z.len() as f64;
                let dz = acc!(*logits);
                for i in 0..z.len() {
                    let p = 1.0 / (1.0 + (-z[i]).exp());
                    dz[i] += g[0] * (p - targets[i]) / n;
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = self.dims2(*logits).1;
                let dz = acc!(*logits);
                let s = g[0] / *count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..v {
                        let y = if c == t { 1.0 } else { 0.0 };
                        dz[r * v + c] += s * (probs[r * v + c] - y);
                    }
                }
            }
        }
    }
}

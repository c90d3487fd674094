//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological backward pass. Parameter leaves borrow their values from the
//! [`ParameterSet`] instead of copying them.

use super::params::{Gradients, ParamId, ParameterSet};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var),
    MeanRows(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).values()[0]
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Leaf for a trainable parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dims");
        let out = va.matmul(vb);
        self.push(Op::MatMul(a, b), out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "elementwise shape mismatch");
        let values = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.rows(), va.cols(), values)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_vec(
            va.rows(),
            va.cols(),
            va.values().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        assert_eq!(vr.len(), n, "add_row width");
        let values = va
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vr.values()[i % n])
            .collect();
        let out = Tensor::from_vec(va.rows(), n, values);
        self.push(Op::AddRow(a, row), out)
    }

    /// `a (m x n) * row (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        assert_eq!(vr.len(), n, "mul_row width");
        let values = va
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vr.values()[i % n])
            .collect();
        let out = Tensor::from_vec(va.rows(), n, values);
        self.push(Op::MulRow(a, row), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let vt = self.value(table);
        let n = vt.cols();
        let mut values = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < vt.rows(), "gather row {r} out of range {}", vt.rows());
            values.extend_from_slice(vt.row_slice(r));
        }
        let out = Tensor::from_vec(rows.len(), n, values);
        self.push(Op::Gather(table, rows.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut values = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols rows");
            let c = vp.cols();
            for r in 0..rows {
                values[r * total + off..r * total + off + c].copy_from_slice(vp.row_slice(r));
            }
            off += c;
        }
        let out = Tensor::from_vec(rows, total, values);
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows cols");
            values.extend_from_slice(vp.values());
            rows += vp.rows();
        }
        let out = Tensor::from_vec(rows, cols, values);
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols range");
        let mut values = Vec::with_capacity(va.rows() * len);
        for r in 0..va.rows() {
            values.extend_from_slice(&va.row_slice(r)[start..start + len]);
        }
        let out = Tensor::from_vec(va.rows(), len, values);
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows range");
        let c = va.cols();
        let out = Tensor::from_vec(len, c, va.values()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Stacks `times` copies of a `1 x n` row.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_rows expects a row");
        let values = va.values().repeat(times);
        let out = Tensor::from_vec(times, va.cols(), values);
        self.push(Op::RepeatRows(a), out)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        assert!(r > 0, "mean over zero rows");
        let mut values = vec![0.0; c];
        for i in 0..r {
            for (acc, x) in values.iter_mut().zip(va.row_slice(i)) {
                *acc += x;
            }
        }
        for v in &mut values {
            *v /= r as f64;
        }
        self.push(Op::MeanRows(a), Tensor::from_vec(1, c, values))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    /// Row-wise softmax. Entries where `mask` is false get probability 0; the
    /// mask is laid out like the input and every row must keep one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = va.row_slice(i);
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max > f64::NEG_INFINITY, "softmax row fully masked");
            let mut z = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    values[i * c + j] = e;
                    z += e;
                }
            }
            for v in &mut values[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        self.push(Op::Softmax(a), Tensor::from_vec(r, c, values))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut values = Vec::with_capacity(r * c);
        for i in 0..r {
            values.extend(log_softmax(va.row_slice(i)));
        }
        self.push(Op::LogSoftmax(a), Tensor::from_vec(r, c, values))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut values = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = va.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            values.extend(row.iter().map(|x| (x - mean) * s));
        }
        self.push(Op::LayerNorm(a, inv_std), Tensor::from_vec(r, c, values))
    }

    /// Gathers single elements into an `n x 1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let va = self.value(a);
        let values = at.iter().map(|&(r, c)| va.get(r, c)).collect();
        let out = Tensor::from_vec(at.len(), 1, values);
        self.push(Op::Pick(a, at.to_vec()), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Gradients of the scalar `loss` for every parameter that reached it.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_all(loss).0
    }

    /// Like [`Graph::backward`] but also returns the adjoint of every node.
    pub fn backward_all(&self, loss: Var) -> (Gradients, NodeGrads) {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads, &mut out);
            grads[idx] = Some(dy);
        }
        (out, NodeGrads(grads))
    }

    fn propagate(
        &self,
        idx: usize,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let y = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, dy),
            Op::MatMul(a, b) => {
                let ga = dy.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(dy);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                let mut neg = dy.clone();
                neg.scale_in_place(-1.0);
                acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let ga = elementwise(dy, self.value(*b), |g, x| g * x);
                let gb = elementwise(dy, self.value(*a), |g, x| g * x);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dy.clone());
                let n = dy.cols();
                let mut g = vec![0.0; n];
                for (i, v) in dy.values().iter().enumerate() {
                    g[i % n] += v;
                }
                let vr = self.value(*row);
                acc(grads, *row, Tensor::from_vec(vr.rows(), vr.cols(), g));
            }
            Op::MulRow(a, row) => {
                let vr = self.value(*row);
                let va = self.value(*a);
                let n = dy.cols();
                let ga = dy
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * vr.values()[i % n])
                    .collect();
                let mut gr = vec![0.0; n];
                for (i, (g, x)) in dy.values().iter().zip(va.values()).enumerate() {
                    gr[i % n] += g * x;
                }
                acc(grads, *a, Tensor::from_vec(dy.rows(), n, ga));
                acc(grads, *row, Tensor::from_vec(vr.rows(), vr.cols(), gr));
            }
            Op::Scale(a, s) => {
                let mut g = dy.clone();
                g.scale_in_place(*s);
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = elementwise(dy, y.unwrap(), |g, s| g * s * (1.0 - s));
                acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = elementwise(dy, y.unwrap(), |g, t| g * (1.0 - t * t));
                acc(grads, *a, g);
            }
            Op::Relu(a) => {
                let g = elementwise(dy, y.unwrap(), |g, r| if r > 0.0 { g } else { 0.0 });
                acc(grads, *a, g);
            }
            Op::Gather(table, rows) => {
                let vt = self.value(*table);
                let n = vt.cols();
                let mut g = Tensor::zeros(vt.rows(), n);
                for (k, &r) in rows.iter().enumerate() {
                    let src = dy.row_slice(k);
                    for (d, s) in g.values_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(grads, *table, g);
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut values = Vec::with_capacity(dy.rows() * c);
                    for r in 0..dy.rows() {
                        values
                            .extend_from_slice(&dy.values()[r * total + off..r * total + off + c]);
                    }
                    acc(grads, p, Tensor::from_vec(dy.rows(), c, values));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let values = dy.values()[off * c..(off + r) * c].to_vec();
                    acc(grads, p, Tensor::from_vec(r, c, values));
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let total = va.cols();
                let mut g = Tensor::zeros(va.rows(), total);
                let len = dy.cols();
                for r in 0..dy.rows() {
                    g.values_mut()[r * total + start..r * total + start + len]
                        .copy_from_slice(dy.row_slice(r));
                }
                acc(grads, *a, g);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut g = Tensor::zeros(va.rows(), c);
                g.values_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.values());
                acc(grads, *a, g);
            }
            Op::RepeatRows(a) => {
                let n = dy.cols();
                let mut g = vec![0.0; n];
                for r in 0..dy.rows() {
                    for (acc, x) in g.iter_mut().zip(dy.row_slice(r)) {
                        *acc += x;
                    }
                }
                acc(grads, *a, Tensor::from_vec(1, n, g));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let r = va.rows();
                let values = dy
                    .values()
                    .repeat(r)
                    .into_iter()
                    .map(|g| g / r as f64)
                    .collect();
                acc(grads, *a, Tensor::from_vec(r, va.cols(), values));
            }
            Op::Transpose(a) => acc(grads, *a, dy.transpose()),
            Op::Softmax(a) => {
                let y = y.unwrap();
                let (r, c) = (y.rows(), y.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let ys = y.row_slice(i);
                    let gs = dy.row_slice(i);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_vec(r, c, g));
            }
            Op::LogSoftmax(a) => {
                let y = y.unwrap();
                let (r, c) = (y.rows(), y.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let ys = y.row_slice(i);
                    let gs = dy.row_slice(i);
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        g[i * c + j] = gs[j] - ys[j].exp() * total;
                    }
                }
                acc(grads, *a, Tensor::from_vec(r, c, g));
            }
            Op::LayerNorm(a, inv_std) => {
                let y = y.unwrap();
                let (r, c) = (y.rows(), y.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let ys = y.row_slice(i);
                    let gs = dy.row_slice(i);
                    let mean_g = gs.iter().sum::<f64>() / c as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[i * c + j] = inv_std[i] * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                acc(grads, *a, Tensor::from_vec(r, c, g));
            }
            Op::Pick(a, at) => {
                let va = self.value(*a);
                let mut g = Tensor::zeros(va.rows(), va.cols());
                let c = va.cols();
                for (k, &(r, col)) in at.iter().enumerate() {
                    g.values_mut()[r * c + col] += dy.values()[k];
                }
                acc(grads, *a, g);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                acc(
                    grads,
                    *a,
                    Tensor::filled(va.rows(), va.cols(), dy.values()[0]),
                );
            }
        }
    }
}

/// Adjoints of every node after a backward sweep.
pub struct NodeGrads(Vec<Option<Tensor>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), values)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax of a slice (max-subtracted).
pub(crate) fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_leaf_grad(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let params = ParameterSet::new();
        let mut g = Graph::new(&params);
        let x = g.leaf(input.clone());
        let y = build(&mut g, x);
        let (_, node_grads) = g.backward_all(y);
        let analytic = node_grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.values_mut()[i] += delta;
                let mut g = Graph::new(&params);
                let x = g.leaf(t);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.values()[i];
            assert!(
                (a - numeric).abs() < 1e-7 * a.abs().max(1.0),
                "entry {i}: {a} vs {numeric}"
            );
        }
    }

    fn input() -> Tensor {
        Tensor::from_vec(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4])
    }

    fn weights() -> Tensor {
        Tensor::from_vec(3, 3, vec![0.5, -0.3, 0.8, 0.1, 0.9, -0.7, 0.2, 0.4, -0.6])
    }

    #[test]
    fn matmul_tanh_sum() {
        check_leaf_grad(
            |g, x| {
                let w = g.leaf(weights());
                let h = g.matmul(x, w);
                let t = g.tanh(h);
                g.sum(t)
            },
            input(),
        );
    }

    #[test]
    fn softmax_weighted() {
        check_leaf_grad(
            |g, x| {
                let mask = [true, false, true, true, true, false];
                let s = g.softmax_rows(x, Some(&mask));
                let w = g.leaf(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
                let p = g.mul(s, w);
                g.sum(p)
            },
            input(),
        );
    }

    #[test]
    fn log_softmax_pick() {
        check_leaf_grad(
            |g, x| {
                let l = g.log_softmax_rows(x);
                let p = g.pick(l, &[(0, 1), (1, 2)]);
                g.sum(p)
            },
            input(),
        );
    }

    #[test]
    fn layer_norm_mul_row() {
        check_leaf_grad(
            |g, x| {
                let n = g.layer_norm_rows(x, 1e-5);
                let gain = g.leaf(Tensor::row(vec![0.5, 2.0, -1.0]));
                let y = g.mul_row(n, gain);
                let w = g.leaf(weights());
                let z = g.matmul(y, w);
                let s = g.sigmoid(z);
                g.sum(s)
            },
            input(),
        );
    }

    #[test]
    fn structural_ops() {
        check_leaf_grad(
            |g, x| {
                let r0 = g.row(x, 0);
                let rep = g.repeat_rows(r0, 3);
                let t = g.transpose(x);
                let c = g.concat_cols(&[rep, t]);
                let s = g.slice_cols(c, 1, 3);
                let m = g.mean_rows(s);
                let both = g.concat_rows(&[m, r0]);
                let sq = g.mul(both, both);
                let rl = g.relu(sq);
                let sc = g.scale(rl, -0.7);
                g.sum(sc)
            },
            input(),
        );
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let params = ParameterSet::new();
        let mut g = Graph::new(&params);
        let table = g.leaf(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = g.gather_rows(table, &[2, 0, 2]);
        let s = g.sum(e);
        let (_, ng) = g.backward_all(s);
        assert_eq!(
            ng.get(table).unwrap().values(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut params = ParameterSet::new();
        let id = params.add("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(&params);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(id).unwrap().values(), &[2.0, 4.0]);
    }
}

//! The tape. Every op appends a node holding its forward value; `backward`
//! walks the tape in reverse creation order.

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::Tensor;
use std::borrow::Cow;
use std::collections::HashMap;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumAll(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    StraightThrough(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Parameters of the store passed to [`Graph::new`] are trainable leaves;
/// parameters of any other store bound through [`Graph::param`] enter as constants.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: Option<&'a ParamStore>,
    trainable_nodes: Vec<Option<Var>>,
    frozen_nodes: HashMap<(usize, usize), Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Graph<'a> {
    pub fn new(trainable: Option<&'a ParamStore>) -> Self {
        let n = trainable.map_or(0, ParamStore::len);
        Graph { nodes: Vec::new(), trainable, trainable_nodes: vec![None; n], frozen_nodes: HashMap::new() }
    }

    /// A graph with no trainable store, for inference.
    pub fn inference() -> Self {
        Graph::new(None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A borrowed constant input.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// An input whose gradient is wanted (see [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Binds a parameter; trainable if `store` is this graph's trainable store.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(tr) = self.trainable {
            if std::ptr::eq(tr, store) {
                if let Some(v) = self.trainable_nodes[id.0] {
                    return v;
                }
                let v = self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true);
                self.trainable_nodes[id.0] = Some(v);
                return v;
            }
        }
        let key = (store as *const ParamStore as usize, id.0);
        if let Some(&v) = self.frozen_nodes.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, false);
        self.frozen_nodes.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push_op(out, Op::MatMulT(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        Tensor::from_vec(x.rows(), x.cols(), x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p + q, "add");
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p - q, "sub");
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p * q, "mul");
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (x, row) = (self.value(a), self.value(r));
        assert_eq!(row.shape(), (1, x.cols()), "add_row: bias shape");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(row.data()) {
                *o += b;
            }
        }
        self.push_op(out, Op::AddRow(a, r), &[a, r])
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (x, row) = (self.value(a), self.value(r));
        assert_eq!(row.shape(), (1, x.cols()), "mul_row: gain shape");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, g) in out.row_mut(i).iter_mut().zip(row.data()) {
                *o *= g;
            }
        }
        self.push_op(out, Op::MulRow(a, r), &[a, r])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push_op(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).log_softmax_rows();
        self.push_op(out, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push_op(out, Op::LayerNorm(a, eps), &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < t.rows(), "gather index {id} out of range {}", t.rows());
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(ids.len(), cols, data);
        self.push_op(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols: height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let out = Tensor::from_vec(len, t.cols(), t.data()[start * t.cols()..(start + len) * t.cols()].to_vec());
        self.push_op(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        self.push_op(out, Op::SliceCols(a, start), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::SumAll(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows() as f64;
        let out = Tensor::from_fn(1, t.cols(), |_, c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n);
        self.push_op(out, Op::MeanRows(a), &[a])
    }

    /// Column-wise max over rows (max-pooling over time).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rows() > 0, "max_rows of empty tensor");
        let mut arg = vec![0; t.cols()];
        for (c, slot) in arg.iter_mut().enumerate() {
            for r in 1..t.rows() {
                if t.get(r, c) > t.get(*slot, c) {
                    *slot = r;
                }
            }
        }
        let out = Tensor::from_fn(1, t.cols(), |_, c| t.get(arg[c], c));
        self.push_op(out, Op::MaxRows(a, arg), &[a])
    }

    /// Gathers individual entries into a `1 x k` row.
    pub fn pick(&mut self, a: Var, positions: &[(usize, usize)]) -> Var {
        let t = self.value(a);
        let out = Tensor::row_vector(positions.iter().map(|&(r, c)| t.get(r, c)).collect());
        self.push_op(out, Op::Pick(a, positions.to_vec()), &[a])
    }

    /// Straight-through estimator: the forward value is `hard`, the backward
    /// pass treats the node as the identity on `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.value(soft).shape(), "straight_through: shape mismatch");
        self.push_op(hard, Op::StraightThrough(soft), &[soft])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let mut send = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    send(*a, g.matmul_t(self.value(*b)));
                }
                if rg(*b) {
                    send(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    send(*a, g.matmul(self.value(*b)));
                }
                if rg(*b) {
                    send(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    send(*a, elementwise(g, z, |p, q| p * q));
                }
                if rg(*b) {
                    send(*b, elementwise(g, x, |p, q| p * q));
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                if rg(*r) {
                    send(*r, column_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (x, row) = (self.value(*a), self.value(*r));
                if rg(*a) {
                    let mut d = g.clone();
                    for k in 0..d.rows() {
                        for (o, s) in d.row_mut(k).iter_mut().zip(row.data()) {
                            *o *= s;
                        }
                    }
                    send(*a, d);
                }
                if rg(*r) {
                    send(*r, column_sums(&elementwise(g, x, |p, q| p * q)));
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, elementwise(g, x, |p, q| if q > 0.0 { p } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    elementwise(g, x, |p, q| {
                        let inner = GELU_C * (q + 0.044715 * q * q * q);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * q * q);
                        p * (0.5 * (1.0 + t) + 0.5 * q * (1.0 - t * t) * dinner)
                    }),
                );
            }
            Op::Tanh(a) => send(*a, elementwise(g, y, |p, t| p * (1.0 - t * t))),
            Op::Sigmoid(a) => send(*a, elementwise(g, y, |p, s| p * s * (1.0 - s))),
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gp), yp) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yp * (gp - dot);
                    }
                }
                send(*a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, gp), ly) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gp - ly.exp() * total;
                    }
                }
                send(*a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, gp), yp) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gp - mean_g - yp * mean_gy);
                    }
                }
                send(*a, d);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (k, &id) in ids.iter().enumerate() {
                    for (o, gp) in d.row_mut(id).iter_mut().zip(g.row(k)) {
                        *o += gp;
                    }
                }
                send(*table, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if rg(p) {
                        let d = Tensor::from_vec(rows, g.cols(), g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec());
                        send(p, d);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if rg(p) {
                        send(p, Tensor::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c)));
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let w = x.cols();
                d.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                send(*a, d);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, d);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                send(*a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                send(*a, Tensor::from_fn(x.rows(), x.cols(), |_, c| g.get(0, c) / n));
            }
            Op::MaxRows(a, arg) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for (c, &r) in arg.iter().enumerate() {
                    d.set(r, c, g.get(0, c));
                }
                send(*a, d);
            }
            Op::Pick(a, positions) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in positions.iter().enumerate() {
                    d.set(r, c, d.get(r, c) + g.get(0, k));
                }
                send(*a, d);
            }
            Op::StraightThrough(soft) => send(*soft, g.clone()),
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect())
}

fn column_sums(g: &Tensor) -> Tensor {
    Tensor::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum())
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `v`, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every trainable parameter into `buffer`.
    pub fn accumulate_into(&self, graph: &Graph<'_>, buffer: &mut GradBuffer) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    buffer.accumulate(id, g);
                }
            }
        }
    }

    /// Gradient of each trainable parameter that received one.
    pub fn params<'g>(&'g self, graph: &'g Graph<'_>) -> impl Iterator<Item = (ParamId, &'g Tensor)> + 'g {
        graph.nodes.iter().enumerate().filter_map(move |(i, node)| match node.op {
            Op::Param(id) => self.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }
}

//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! records its inputs, and returns a [`NodeId`]. Node ids increase with
//! creation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Trainable tensors are not copied onto the tape: a parameter node reads its
//! value from the borrowed [`ParamStore`], and its gradient lands in the
//! [`Gradients`] returned by `backward`.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor, View};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Row(NodeId, usize),
    StackRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    Scale(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` only for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value, false, "constant")
    }

    /// The tape node of a trainable tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Row `r` of `src` as a `1 × cols` tensor.
    pub fn row(&mut self, src: NodeId, r: usize) -> Result<NodeId> {
        let v = self.value(src);
        if r >= v.rows() {
            return Err(Error::Shape {
                op: "row",
                lhs: v.shape(),
                rhs: (r, 0),
            });
        }
        let out = Tensor::row_vector(v.row(r).to_vec());
        let rg = self.rg(src);
        self.push(Op::Row(src, r), out, rg, "row")
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "stack_rows",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "stack_rows",
                    lhs: self.value(first).shape(),
                    rhs: v.shape(),
                });
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(rows, cols, data)?;
        self.push(Op::StackRows(parts.to_vec()), out, rg, "stack_rows")
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(va.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols(a, b), out, rg, "concat_cols")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out = gemm(View::of(va), View::of(vb));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg, "matmul")
    }

    /// `a · bᵀ`; with two `1 × K` rows this is the inner product.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out = gemm(View::of(va), View::of(vb).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNt(a, b), out, rg, "matmul_nt")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg, "sub")
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRow(a, bias), out, rg, "add_row")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg, "relu")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), out, rg, "square")
    }

    /// Sum of every element, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = 0.0;
        for x in self.value(a).data() {
            acc += x;
        }
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(acc), rg, "sum")
    }

    /// Mean over the rows of `a`: the set average of its row vectors.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.rows() == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: v.shape(),
                rhs: (1, v.cols()),
            });
        }
        if v.rows() == 1 {
            let out = v.clone();
            let rg = self.rg(a);
            return self.push(Op::MeanRows(a), out, rg, "mean_rows");
        }
        let n = v.rows() as f64;
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), Tensor::row_vector(out), rg, "mean_rows")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg, "scale")
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the
    /// store. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.set(*p, g),
                Op::Row(src, r) => {
                    if self.rg(*src) {
                        let (rows, cols) = self.shape(*src);
                        let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
                        for (a, x) in acc.row_mut(*r).iter_mut().zip(g.data()) {
                            *a += x;
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        if self.rg(p) {
                            let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            self.accumulate(&mut grads, p, Tensor::new(rows, cols, slice)?);
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    if self.rg(*a) {
                        let mut da = Vec::with_capacity(g.rows() * ca);
                        for r in 0..g.rows() {
                            da.extend_from_slice(&g.row(r)[..ca]);
                        }
                        self.accumulate(&mut grads, *a, Tensor::new(g.rows(), ca, da)?);
                    }
                    if self.rg(*b) {
                        let mut db = Vec::with_capacity(g.rows() * cb);
                        for r in 0..g.rows() {
                            db.extend_from_slice(&g.row(r)[ca..]);
                        }
                        self.accumulate(&mut grads, *b, Tensor::new(g.rows(), cb, db)?);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = gemm(View::of(&g), View::of(self.value(*b)).t());
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = gemm(View::of(self.value(*a)).t(), View::of(&g));
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        let da = gemm(View::of(&g), View::of(self.value(*b)));
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = gemm(View::of(&g).t(), View::of(self.value(*a)));
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let mut db = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (d, x) in db.iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        self.accumulate(&mut grads, *bias, Tensor::row_vector(db));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at exactly 0.
                    let y = self.value(NodeId(idx));
                    let mut da = g;
                    for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                        if yv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut da = g;
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        *d *= 2.0 * xv;
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let da = Tensor::new(rows, cols, vec![g.item(); rows * cols])?;
                    self.accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = rows as f64;
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for (d, x) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *d = if rows == 1 { *x } else { x / n };
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accumulate(&mut grads, *a, g.map(|x| x * s));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

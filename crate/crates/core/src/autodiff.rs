//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are appended to a [`Tape`] as they are evaluated, so node ids
//! are already in topological order and the backward sweep simply walks the
//! tape from the loss node down to zero. Parameters are read straight out of
//! the borrowed [`ParamStore`]; their gradients land in a [`Gradients`] buffer
//! that the caller folds back into the store.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    OneMinus,
    Sigmoid,
    Tanh,
    Concat,
    RowSelect,
    GatherCols,
    LogSoftmax,
    Sum,
    Pick,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::OneMinus,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Concat,
        OpKind::RowSelect,
        OpKind::GatherCols,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::OneMinus => "one_minus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Concat => "concat",
            OpKind::RowSelect => "row_select",
            OpKind::GatherCols => "gather_cols",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    RowSelect { table: NodeId, ids: Vec<usize> },
    GatherCols { input: NodeId, cols: Vec<usize> },
    LogSoftmax(NodeId),
    Sum(NodeId),
    Pick { input: NodeId, row: usize, col: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::OneMinus(_) => OpKind::OneMinus,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Concat(_) => OpKind::Concat,
            Op::RowSelect { .. } => OpKind::RowSelect,
            Op::GatherCols { .. } => OpKind::GatherCols,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Deliberately wrong backward rule, for negative-control gradient checks.
#[derive(Debug, Clone, Copy)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(params: &'a ParamStore, fault: Option<Fault>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn params(&self) -> &'a ParamStore {
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
            (None, Op::Param(p)) => self.params.value(*p),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} (node {})",
                op.kind().name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; gradients flowing into it are dropped.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| 1.0 - v);
        self.push(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Concatenates along columns; all inputs must have the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Embedding lookup: output row `i` is row `ids[i]` of `table`.
    pub fn row_select(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::shape(
                    "row_select",
                    format!("row {id} out of range for {} rows", t.rows()),
                ));
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::from_vec(ids.len(), t.cols(), data)?;
        self.push(
            out,
            Op::RowSelect {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Output column `j` is column `cols[j]` of the input.
    pub fn gather_cols(&mut self, input: NodeId, cols: &[usize]) -> Result<NodeId> {
        let t = self.value(input);
        if let Some(&bad) = cols.iter().find(|&&c| c >= t.cols()) {
            return Err(Error::shape(
                "gather_cols",
                format!("column {bad} out of range for {} columns", t.cols()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * cols.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::from_vec(t.rows(), cols.len(), data)?;
        self.push(
            out,
            Op::GatherCols {
                input,
                cols: cols.to_vec(),
            },
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(tensor::log_softmax(t.row_slice(r)));
        }
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn pick(&mut self, input: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let t = self.value(input);
        if row >= t.rows() || col >= t.cols() {
            return Err(Error::shape(
                "pick",
                format!("({row},{col}) outside {:?}", t.shape()),
            ));
        }
        let out = Tensor::scalar(t.get(row, col));
        self.push(out, Op::Pick { input, row, col })
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_vec(va.rows(), va.cols(), data);
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut data = Vec::with_capacity(va.len());
            for r in 0..va.rows() {
                data.extend(va.row_slice(r).iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
            }
            return Tensor::from_vec(va.rows(), va.cols(), data);
        }
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", va.shape(), vb.shape()),
        ))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads = Gradients::for_store(self.params);
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates d(loss)/d(param) for every parameter reachable from `loss`.
    pub fn backward_into(&self, loss: NodeId, out: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let k = match self.fault {
                Some(f) if f.op == node.op.kind() => f.factor,
                _ => 1.0,
            };
            let out_val = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "gradient of `{}`",
                            self.params.get(*p).name
                        )));
                    }
                    out.add(*p, g.shape(), |acc| acc.add_assign(&g));
                }
                Op::MatMul(a, b) => {
                    let mut ga = tensor::matmul_bt(&g, self.value(*b));
                    let mut gb = tensor::matmul_at(self.value(*a), &g);
                    ga.scale_assign(k);
                    gb.scale_assign(k);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -k } else { k };
                    let vb_shape = self.value(*b).shape();
                    let gb = if vb_shape == g.shape() {
                        g.map(|v| sign * v)
                    } else {
                        let mut s = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, v) in s.data_mut().iter_mut().zip(g.row_slice(r)) {
                                *acc += sign * v;
                            }
                        }
                        s
                    };
                    accumulate(&mut grads, *a, g.map(|v| k * v));
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, vb, |gv, y| k * gv * y);
                    let gb = zip_map(&g, va, |gv, x| k * gv * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| k * s * v)),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.map(|v| -k * v)),
                Op::Sigmoid(a) => {
                    let y = out_val.expect("op nodes own values");
                    accumulate(&mut grads, *a, zip_map(&g, y, |gv, y| k * gv * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = out_val.expect("op nodes own values");
                    accumulate(&mut grads, *a, zip_map(&g, y, |gv, y| k * gv * (1.0 - y * y)));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[offset..offset + cols];
                            for (d, s) in gp.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *d = k * s;
                            }
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::RowSelect { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows(), t.cols());
                    let cols = t.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += k * s;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::GatherCols { input, cols } => {
                    let t = self.value(*input);
                    let mut gi = Tensor::zeros(t.rows(), t.cols());
                    let width = t.cols();
                    for r in 0..g.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            gi.data_mut()[r * width + c] += k * g.get(r, j);
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::LogSoftmax(a) => {
                    let y = out_val.expect("op nodes own values");
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        let gs: f64 = g.row_slice(r).iter().sum();
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] = k * (g.get(r, c) - y.get(r, c).exp() * gs);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let [r, c] = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, k * g.data()[0]));
                }
                Op::Pick { input, row, col } => {
                    let [r, c] = self.value(*input).shape();
                    let mut gi = Tensor::zeros(r, c);
                    gi.data_mut()[row * c + col] = k * g.data()[0];
                    accumulate(&mut grads, *input, gi);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, y);
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

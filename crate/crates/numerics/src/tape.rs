//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes hold their
//! forward value; parameters are referenced from a borrowed [`ParamStore`]
//! rather than copied. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for leaves and parameters only.
//!
//! Operand shapes are checked eagerly and a mismatch panics: at this level
//! it is always a wiring bug in model code, not a data error.

use std::sync::OnceLock;

use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{normalize_row, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward and backward rules live outside this crate.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Tensor;

    /// Vector-Jacobian product: gradients w.r.t. each input given the
    /// upstream gradient of the output. `None` means no gradient flows.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

fn empty_store() -> &'static ParamStore {
    static EMPTY: OnceLock<ParamStore> = OnceLock::new();
    EMPTY.get_or_init(ParamStore::new)
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store attached.
    pub fn new() -> Self {
        Tape {
            params: empty_store(),
            nodes: Vec::new(),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
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

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    #[track_caller]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    #[track_caller]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b)).expect("matmul_nt");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    #[track_caller]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("add");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    #[track_caller]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b)).expect("sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    #[track_caller]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).mul(self.value(b)).expect("mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[1, cols]` bias to every row of `x`.
    #[track_caller]
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x).add_row(self.value(bias)).expect("add_row");
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax(1);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    #[track_caller]
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        assert!(
            g.len() == cols && b.len() == cols,
            "layer_norm: gain/bias width {} / {} vs {}",
            g.len(),
            b.len(),
            cols
        );
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        if cols > 0 {
            for row in normalized.data_mut().chunks_mut(cols) {
                inv_std.push(normalize_row(row).1);
            }
        }
        let mut out = normalized.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                for ((v, gi), bi) in row.iter_mut().zip(g.data()).zip(b.data()) {
                    *v = *v * gi + bi;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    #[track_caller]
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals).expect("concat_cols");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    #[track_caller]
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals).expect("concat_rows");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    #[track_caller]
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end).expect("slice_cols");
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start, end), rg)
    }

    #[track_caller]
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end).expect("slice_rows");
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start, end), rg)
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    #[track_caller]
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).gather_rows(ids).expect("gather_rows");
        let rg = self.rg(table);
        self.push(out, Op::Gather(table, ids.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Sum of all entries as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
        let out = op.forward(&vals);
        let rg = inputs.iter().any(|&p| self.rg(p));
        self.push(out, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Back-propagates from a one-element `loss`.
    #[track_caller]
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = ParamGrads::new(self.params.len());
        let mut leaves: Vec<(usize, Tensor)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => leaves.push((i, g)),
                Op::Param(id) => params.add(*id, g),
                op => self.backprop(op, i, &g, &mut grads),
            }
        }
        Gradients { params, leaves }
    }

    fn backprop(&self, op: &Op, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref().expect("value");
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t).expect("grad shape"),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_nt(self.value(*b)).expect("matmul grad"));
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).matmul_tn(g).expect("matmul grad"));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul(self.value(*b)).expect("matmul_nt grad"));
                }
                if self.rg(*b) {
                    send(*b, g.matmul_tn(self.value(*a)).expect("matmul_nt grad"));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.mul(self.value(*b)).expect("mul grad"));
                }
                if self.rg(*b) {
                    send(*b, g.mul(self.value(*a)).expect("mul grad"));
                }
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone());
                if self.rg(*bias) {
                    send(*bias, column_sums(g));
                }
            }
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::Sigmoid(a) => send(*a, zip(g, out, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => send(*a, zip(g, out, |gi, y| gi * (1.0 - y * y))),
            Op::Relu(a) => send(*a, zip(g, out, |gi, y| if y > 0.0 { gi } else { 0.0 })),
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut dx = Tensor::zeros(out.shape());
                if cols > 0 {
                    for ((dxr, yr), gr) in dx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(out.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                        for ((d, y), gi) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (gi - dot);
                        }
                    }
                }
                send(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = out.cols();
                if self.rg(*gain) {
                    send(*gain, column_sums(&g.mul(normalized).expect("ln grad")));
                }
                if self.rg(*bias) {
                    send(*bias, column_sums(g));
                }
                if self.rg(*x) && cols > 0 {
                    let gain_v = self.value(*gain).data();
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(out.shape());
                    for (r, ((dxr, xh), gr)) in dx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(normalized.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                        .enumerate()
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gain_v[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let k = inv_std[r] / n;
                        for j in 0..cols {
                            let d = gr[j] * gain_v[j];
                            dxr[j] = k * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        send(p, g.slice_cols(start, start + w).expect("concat grad"));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        send(p, g.slice_rows(start, start + h).expect("concat grad"));
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                send(*a, dx);
            }
            Op::SliceRows(a, start, _end) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.shape());
                let c = src.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, dx);
            }
            Op::Gather(table, ids) => {
                let src = self.value(*table);
                let mut dt = Tensor::zeros(src.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, gi) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += gi;
                    }
                }
                send(*table, dt);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                send(*a, Tensor::full(&shape, g.item()));
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
                let gs = op.backward(&vals, out, g);
                assert_eq!(gs.len(), inputs.len(), "{}: gradient arity", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        send(v, gi);
                    }
                }
            }
        }
    }
}

fn zip(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    if cols > 0 {
        for row in g.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![1, cols], out).expect("shape")
}

/// Result of [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: ParamGrads,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient of a [`Tape::leaf`] input, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, t)| t)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

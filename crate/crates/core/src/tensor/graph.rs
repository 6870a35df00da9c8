use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Operation kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    ConcatRows,
    SliceCols,
    SelectRows,
    RowSoftmax,
    Exp,
    Log,
    Relu,
    RowMin,
    Sum,
    MeanAxis,
    SumAxis,
    L2NormalizeRows,
    LogSumExpRows,
    StopGradient,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::SelectRows => "select_rows",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::RowMin => "row_min",
            OpKind::Sum => "sum",
            OpKind::MeanAxis => "mean_axis",
            OpKind::SumAxis => "sum_axis",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::LogSumExpRows => "logsumexp_rows",
            OpKind::StopGradient => "stop_gradient",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 23] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::ConcatRows,
    OpKind::SliceCols,
    OpKind::SelectRows,
    OpKind::RowSoftmax,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Relu,
    OpKind::RowMin,
    OpKind::Sum,
    OpKind::MeanAxis,
    OpKind::SumAxis,
    OpKind::L2NormalizeRows,
    OpKind::LogSumExpRows,
    OpKind::StopGradient,
];

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(OpKind, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    RowSoftmax(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    RowMin(usize, Vec<usize>),
    Sum(usize),
    MeanAxis(usize, usize),
    SumAxis(usize, usize),
    L2NormalizeRows(usize, Vec<f64>),
    LogSumExpRows(usize),
    StopGradient,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(k, ..) => *k,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::RowSoftmax(..) => OpKind::RowSoftmax,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Relu(..) => OpKind::Relu,
            Op::RowMin(..) => OpKind::RowMin,
            Op::Sum(..) => OpKind::Sum,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::L2NormalizeRows(..) => OpKind::L2NormalizeRows,
            Op::LogSumExpRows(..) => OpKind::LogSumExpRows,
            Op::StopGradient => OpKind::StopGradient,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Values captured at non-differentiable decision points (stop-gradient
/// outputs, argmin indices, hard one-hot choices) during a recording pass.
///
/// Replaying a tape on a perturbed input pins those decisions to their
/// recorded values, so a finite-difference probe sees only the
/// differentiable path.
#[derive(Clone, Debug, Default)]
pub struct Replay {
    tensors: Vec<Tensor>,
    indices: Vec<Vec<usize>>,
}

impl Replay {
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty() && self.indices.is_empty()
    }
}

enum Mode {
    Record(Replay),
    Replay {
        tape: Replay,
        tensor_cursor: usize,
        index_cursor: usize,
    },
}

/// A single-use computation tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    mode: RefCell<Mode>,
    fault: Cell<Option<OpKind>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            mode: RefCell::new(Mode::Record(Replay::default())),
            fault: Cell::new(None),
        }
    }

    /// A graph that reuses every decision recorded in `tape`.
    pub fn replaying(tape: Replay) -> Self {
        let g = Self::new();
        *g.mode.borrow_mut() = Mode::Replay {
            tape,
            tensor_cursor: 0,
            index_cursor: 0,
        };
        g
    }

    /// Decisions recorded so far. Empty for replaying graphs.
    pub fn take_replay(&self) -> Replay {
        match &mut *self.mode.borrow_mut() {
            Mode::Record(r) => std::mem::take(r),
            Mode::Replay { .. } => Replay::default(),
        }
    }

    /// Negates the backward rule of `kind`. Test hook for gradcheck
    /// negative controls.
    #[doc(hidden)]
    pub fn inject_sign_flip(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf; never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Records a non-differentiable choice, or returns the recorded one when
    /// replaying.
    pub fn decide(&self, t: Tensor) -> Result<Tensor> {
        match &mut *self.mode.borrow_mut() {
            Mode::Record(r) => {
                r.tensors.push(t.clone());
                Ok(t)
            }
            Mode::Replay {
                tape,
                tensor_cursor,
                ..
            } => {
                let rec = tape.tensors.get(*tensor_cursor).ok_or_else(|| {
                    TensorError::ReplayMismatch("ran past recorded tensors".into())
                })?;
                if rec.shape() != t.shape() {
                    return Err(TensorError::ReplayMismatch(format!(
                        "recorded shape {:?}, computed {:?}",
                        rec.shape(),
                        t.shape()
                    )));
                }
                *tensor_cursor += 1;
                Ok(rec.clone())
            }
        }
    }

    pub fn decide_indices(&self, idx: Vec<usize>) -> Result<Vec<usize>> {
        match &mut *self.mode.borrow_mut() {
            Mode::Record(r) => {
                r.indices.push(idx.clone());
                Ok(idx)
            }
            Mode::Replay {
                tape, index_cursor, ..
            } => {
                let rec = tape.indices.get(*index_cursor).ok_or_else(|| {
                    TensorError::ReplayMismatch("ran past recorded indices".into())
                })?;
                if rec.len() != idx.len() {
                    return Err(TensorError::ReplayMismatch(format!(
                        "recorded {} indices, computed {}",
                        rec.len(),
                        idx.len()
                    )));
                }
                *index_cursor += 1;
                Ok(rec.clone())
            }
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracks(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn emit(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.tracks(i));
        Ok(self.push(value, if rg { op } else { Op::Leaf }, rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let fault = self.fault.get();
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let sign = if fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += sign * c;
                        }
                    }
                    slot @ None => {
                        *slot = Some(contrib.into_iter().map(|c| sign * c).collect());
                    }
                }
            };
            backward_rule(&nodes, node, &g, &mut acc);
        }
        Ok(Gradients { leaves })
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &[f64], acc: &mut dyn FnMut(usize, Vec<f64>)) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (r, c) = (out.rows(), out.cols());
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                OpKind::Add => (g.to_vec(), g.to_vec()),
                OpKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                OpKind::Mul => {
                    let mut ga = vec![0.0; r * c];
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            ga[k] = g[k] * bget(tb, i, j);
                            gb[k] = g[k] * bget(ta, i, j);
                        }
                    }
                    (ga, gb)
                }
                OpKind::Div => {
                    let mut ga = vec![0.0; r * c];
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let (x, y) = (bget(ta, i, j), bget(tb, i, j));
                            ga[k] = g[k] / y;
                            gb[k] = -g[k] * x / (y * y);
                        }
                    }
                    (ga, gb)
                }
                _ => unreachable!("non-binary kind in Binary op"),
            };
            acc(*a, reduce_to(&ga, r, c, ta.rows(), ta.cols()));
            acc(*b, reduce_to(&gb, r, c, tb.rows(), tb.cols()));
        }
        Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
        Op::AddScalar(a) => acc(*a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).expect("grad shape");
            let ga = gt.matmul(&tb.transpose()).expect("matmul grad");
            let gb = ta.transpose().matmul(&gt).expect("matmul grad");
            acc(*a, ga.into_data());
            acc(*b, gb.into_data());
        }
        Op::Transpose(a) => {
            let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).expect("grad shape");
            acc(*a, gt.transpose().into_data());
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                acc(p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            let ta = val(*a);
            let (r, c) = (ta.rows(), ta.cols());
            let w = out.cols();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            acc(*a, ga);
        }
        Op::SelectRows(a, idx) => {
            let ta = val(*a);
            let c = ta.cols();
            let mut ga = vec![0.0; ta.numel()];
            for (k, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    ga[src * c + j] += g[k * c + j];
                }
            }
            acc(*a, ga);
        }
        Op::RowSoftmax(a) => {
            let (r, c) = (out.rows(), out.cols());
            let y = out.data();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let row = i * c..(i + 1) * c;
                let dot: f64 = g[row.clone()]
                    .iter()
                    .zip(&y[row.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                for k in row {
                    ga[k] = y[k] * (g[k] - dot);
                }
            }
            acc(*a, ga);
        }
        Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Log(a) => acc(
            *a,
            g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
        ),
        Op::Relu(a) => acc(
            *a,
            g.iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::RowMin(a, argmin) => {
            let ta = val(*a);
            let c = ta.cols();
            let mut ga = vec![0.0; ta.numel()];
            for (i, &j) in argmin.iter().enumerate() {
                ga[i * c + j] = g[i];
            }
            acc(*a, ga);
        }
        Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
        Op::MeanAxis(a, axis) | Op::SumAxis(a, axis) => {
            let ta = val(*a);
            let (r, c) = (ta.rows(), ta.cols());
            let denom = match (&node.op, axis) {
                (Op::MeanAxis(..), 0) => r as f64,
                (Op::MeanAxis(..), _) => c as f64,
                _ => 1.0,
            };
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = if *axis == 0 { g[j] } else { g[i] } / denom;
                }
            }
            acc(*a, ga);
        }
        Op::L2NormalizeRows(a, norms) => {
            let (r, c) = (out.rows(), out.cols());
            let y = out.data();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                if norms[i] == 0.0 {
                    continue;
                }
                let row = i * c..(i + 1) * c;
                let dot: f64 = g[row.clone()]
                    .iter()
                    .zip(&y[row.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                for k in row {
                    ga[k] = (g[k] - y[k] * dot) / norms[i];
                }
            }
            acc(*a, ga);
        }
        Op::LogSumExpRows(a) => {
            let ta = val(*a);
            let (r, c) = (ta.rows(), ta.cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let lse = out.data()[i];
                for j in 0..c {
                    ga[i * c + j] = g[i] * (ta.data()[i * c + j] - lse).exp();
                }
            }
            acc(*a, ga);
        }
    }
}

#[inline]
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = (t.rows(), t.cols());
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    t.data()[ii * c + jj]
}

fn reduce_to(g: &[f64], r: usize, c: usize, tr: usize, tc: usize) -> Vec<f64> {
    if r == tr && c == tc {
        return g.to_vec();
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        for j in 0..c {
            let ii = if tr == 1 { 0 } else { i };
            let jj = if tc == 1 { 0 } else { j };
            out[ii * tc + jj] += g[i * c + j];
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.require_matrix(op)?;
    let (br, bc) = b.require_matrix(op)?;
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

/// Gradients of tracked leaves after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    /// Gradient of `v`, or zeros of its shape if nothing reached it.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let s = v.value();
            Tensor::new(s.shape().to_vec(), vec![0.0; s.numel()]).expect("shape")
        })
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.g.value(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.tracks(self.id)
    }

    fn binary(self, kind: OpKind, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        let name = kind.name();
        let (r, c) = broadcast_shape(name, &a, &b)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let (x, y) = (bget(&a, i, j), bget(&b, i, j));
                out[i * c + j] = match kind {
                    OpKind::Add => x + y,
                    OpKind::Sub => x - y,
                    OpKind::Mul => x * y,
                    OpKind::Div => {
                        if y == 0.0 {
                            return Err(TensorError::DivisionByZero);
                        }
                        x / y
                    }
                    _ => unreachable!(),
                };
            }
        }
        self.g.emit(
            name,
            Tensor::matrix(r, c, out)?,
            Op::Binary(kind, self.id, rhs.id),
            &[self.id, rhs.id],
        )
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(OpKind::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(OpKind::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(OpKind::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(OpKind::Div, rhs)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * factor);
        self.g
            .emit("scale", v, Op::Scale(self.id, factor), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x + s);
        self.g
            .emit("add_scalar", v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().matmul(&rhs.value())?;
        self.g
            .emit("matmul", v, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn t(self) -> Result<Var<'g>> {
        let a = self.value();
        a.require_matrix("transpose")?;
        self.g.emit(
            "transpose",
            a.transpose(),
            Op::Transpose(self.id),
            &[self.id],
        )
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().expect("concat_rows of nothing");
        let g = first.g;
        let cols = first.value().require_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = v.require_matrix("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        g.emit(
            "concat_rows",
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(ids.clone()),
            &ids,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.require_matrix("slice_cols")?;
        if start > end || end > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&a.row(i)[start..end]);
        }
        self.g.emit(
            "slice_cols",
            Tensor::matrix(r, w, data)?,
            Op::SliceCols(self.id, start),
            &[self.id],
        )
    }

    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::OutOfRange {
                    op: "select_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(a.row(i));
        }
        self.g.emit(
            "select_rows",
            Tensor::matrix(idx.len(), c, data)?,
            Op::SelectRows(self.id, idx.to_vec()),
            &[self.id],
        )
    }

    pub fn row_softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.require_matrix("row_softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = a.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        self.g.emit(
            "row_softmax",
            Tensor::matrix(r, c, out)?,
            Op::RowSoftmax(self.id),
            &[self.id],
        )
    }

    pub fn exp(self) -> Result<Var<'g>> {
        let v = self.value().map(f64::exp);
        self.g.emit("exp", v, Op::Exp(self.id), &[self.id])
    }

    pub fn log(self) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(&bad) = a.data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::LogNonPositive(bad));
        }
        self.g
            .emit("log", a.map(f64::ln), Op::Log(self.id), &[self.id])
    }

    /// `max(x, 0)`.
    pub fn relu(self) -> Result<Var<'g>> {
        let v = self.value().map(|x| x.max(0.0));
        self.g.emit("relu", v, Op::Relu(self.id), &[self.id])
    }

    /// Row-wise minimum (`R×C → R×1`). The argmin is saved at forward time
    /// (lowest index on ties) and is the only element receiving gradient.
    pub fn row_min(self) -> Result<(Var<'g>, Vec<usize>)> {
        let a = self.value();
        let (r, _) = a.require_matrix("row_min")?;
        let mut argmin = Vec::with_capacity(r);
        for i in 0..r {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            argmin.push(best);
        }
        let argmin = self.g.decide_indices(argmin)?;
        let vals: Vec<f64> = argmin
            .iter()
            .enumerate()
            .map(|(i, &j)| a.get(i, j))
            .collect();
        let v = self.g.emit(
            "row_min",
            Tensor::matrix(r, 1, vals)?,
            Op::RowMin(self.id, argmin.clone()),
            &[self.id],
        )?;
        Ok((v, argmin))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s: f64 = self.value().data().iter().sum();
        self.g
            .emit("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'g>> {
        let a = self.value();
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let (r, c) = a.require_matrix(name)?;
        let (or, oc) = if axis == 0 { (1, c) } else { (r, 1) };
        let mut out = vec![0.0; or * oc];
        for i in 0..r {
            for j in 0..c {
                out[if axis == 0 { j } else { i }] += a.get(i, j);
            }
        }
        if mean {
            let d = if axis == 0 { r } else { c } as f64;
            out.iter_mut().for_each(|v| *v /= d);
        }
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        self.g
            .emit(name, Tensor::matrix(or, oc, out)?, op, &[self.id])
    }

    /// Mean over rows (`axis = 0`, giving `1×C`) or columns (`axis = 1`, `R×1`).
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce_axis(axis, false)
    }

    /// Unit-norm rows. Zero rows stay zero and pass no gradient.
    pub fn l2_normalize_rows(self) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.require_matrix("l2_normalize_rows")?;
        let mut out = a.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = super::norm(a.row(i));
            if n == 0.0 {
                log::warn!("l2_normalize_rows: zero row {i}; output left at zero");
            } else {
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        self.g.emit(
            "l2_normalize_rows",
            Tensor::matrix(r, c, out)?,
            Op::L2NormalizeRows(self.id, norms),
            &[self.id],
        )
    }

    /// Row-wise cosine similarity of equal-shape inputs (`R×C → R×1`).
    pub fn cosine_rows(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.l2_normalize_rows()?
            .mul(rhs.l2_normalize_rows()?)?
            .sum_axis(1)
    }

    /// All-pairs cosine similarity (`R×C, S×C → R×S`).
    pub fn cosine_matrix(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.l2_normalize_rows()?
            .matmul(rhs.l2_normalize_rows()?.t()?)
    }

    /// Stabilized `log Σ_j exp(x_ij)` per row (`R×C → R×1`).
    pub fn logsumexp_rows(self) -> Result<Var<'g>> {
        let a = self.value();
        let (r, _) = a.require_matrix("logsumexp_rows")?;
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = a.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.g.emit(
            "logsumexp_rows",
            Tensor::matrix(r, 1, out)?,
            Op::LogSumExpRows(self.id),
            &[self.id],
        )
    }

    /// Forward identity, backward zero. When the graph is replaying, the
    /// forward value is the one recorded on the tape.
    pub fn stop_gradient(self) -> Result<Var<'g>> {
        let v = self.g.decide((*self.value()).clone())?;
        Ok(self.g.push(v, Op::StopGradient, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let y = g.constant(t(1, 2, &[0.0, 0.0])).row_softmax().unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.param(t(1, 3, &[1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.stop_gradient().unwrap().mul(x).unwrap();
        assert_eq!(y.item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&x).item(), 3.0);
    }

    #[test]
    fn stop_gradient_alone_gives_zero() {
        let g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let s = x.stop_gradient().unwrap();
        assert_eq!(s.value().data(), &[1.0, 2.0]);
        let loss = s.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = x.mul(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn log_of_non_positive_is_rejected() {
        let g = Graph::new();
        assert!(matches!(
            g.constant(t(1, 2, &[1.0, 0.0])).log(),
            Err(TensorError::LogNonPositive(_))
        ));
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let g = Graph::new();
        let a = g.constant(t(1, 2, &[1.0, 1.0]));
        let b = g.constant(t(1, 2, &[1.0, 0.0]));
        assert_eq!(a.div(b).unwrap_err(), TensorError::DivisionByZero);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn broadcast_row_and_column() {
        let g = Graph::new();
        let m = g.param(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = g.param(t(1, 3, &[10.0, 20.0, 30.0]));
        let col = g.param(t(2, 1, &[1.0, 2.0]));
        let y = m.add(row).unwrap().mul(col).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 33.0, 28.0, 50.0, 72.0]);
        let grads = g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(&row).data(), &[3.0, 3.0, 3.0]);
        assert_eq!(grads.wrt(&col).data(), &[66.0, 75.0]);
        assert_eq!(grads.wrt(&m).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn row_min_routes_to_lowest_index_on_ties() {
        let g = Graph::new();
        let x = g.param(t(2, 3, &[2.0, 1.0, 1.0, 0.5, 3.0, 0.5]));
        let (m, argmin) = x.row_min().unwrap();
        assert_eq!(argmin, vec![1, 0]);
        assert_eq!(m.value().data(), &[1.0, 0.5]);
        let grads = g.backward(m.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let g = Graph::new();
        let v = g.constant(t(1, 3, &[0.3, -2.0, 5.0]));
        assert!((v.cosine_rows(v).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_with_zero_vector_is_zero_with_zero_grad() {
        let g = Graph::new();
        let z = g.param(Tensor::zeros(1, 3));
        let v = g.param(t(1, 3, &[1.0, 2.0, 3.0]));
        let s = z.cosine_rows(v).unwrap();
        assert_eq!(s.item(), 0.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&z).data(), &[0.0; 3]);
        assert_eq!(grads.wrt(&v).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(t(1, 2, &[1.0, 2.0]));
        let p = g.param(t(1, 2, &[3.0, 4.0]));
        let loss = c.mul(p).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(&c).is_none());
        assert_eq!(grads.wrt(&p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn replay_pins_stop_gradient_value() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        x.stop_gradient().unwrap();
        let tape = g.take_replay();
        let g2 = Graph::replaying(tape);
        let x2 = g2.param(Tensor::scalar(5.0));
        assert_eq!(x2.stop_gradient().unwrap().item(), 2.0);
    }

    #[test]
    fn opkind_names_round_trip() {
        for k in ALL_KINDS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}

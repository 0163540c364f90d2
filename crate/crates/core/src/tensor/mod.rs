//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Operations build
//! new nodes that remember their parents; [`Tensor::backward`] walks the graph
//! in reverse topological order and accumulates adjoints into every node that
//! requires a gradient. Nodes that do not require a gradient drop their
//! parents, so inference-only graphs keep no tape.
//!
//! There is no implicit broadcasting. The two exceptions are a scalar operand
//! in [`Tensor::add`]/[`Tensor::sub`]/[`Tensor::mul`] and the explicit
//! [`Tensor::add_row_bias`].

mod kernels;
pub mod optim;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use optim::{OptimizerKind, OptimizerState, Param};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Matmul(Tensor, Tensor),
    Elementwise(Elementwise, Tensor, Tensor),
    Scale(Tensor, f64),
    AddRowBias(Tensor, Tensor),
    Silu(Tensor),
    SoftmaxRows(Tensor),
    Mse(Tensor, Tensor),
    Sum(Tensor),
    ConcatCols(Tensor, Tensor),
    ConcatRows(Vec<Tensor>),
    GatherRows(Tensor, Vec<usize>),
    Transpose(Tensor),
    Column(Tensor, usize),
    CrossEntropy(Tensor, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Elementwise(Elementwise::Add, ..) => "add",
            Op::Elementwise(Elementwise::Sub, ..) => "sub",
            Op::Elementwise(Elementwise::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(..) => "transpose",
            Op::Column(..) => "column",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Elementwise(_, a, b)
            | Op::AddRowBias(a, b)
            | Op::Mse(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::Transpose(a)
            | Op::Column(a, _)
            | Op::CrossEntropy(a, _) => vec![a],
            Op::ConcatRows(parts) => parts.iter().collect(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Constant subgraphs keep no tape.
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        })))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: Op::Leaf,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::leaf(vec![], vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("valid zeros")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![1.0; numel(shape)], false).expect("valid ones")
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(vec![n, n], data, false).expect("valid identity")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(self.data(), other.data(), &mut out, m, k, n);
        Tensor::build(vec![m, n], out, Op::Matmul(self.clone(), other.clone()))
    }

    pub fn elementwise(&self, other: &Tensor, kind: Elementwise) -> Result<Tensor> {
        let op_name = match kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
        };
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let (shape, data) = if self.shape() == other.shape() {
            let d = self.data().iter().zip(other.data()).map(|(&x, &y)| f(x, y)).collect();
            (self.shape().to_vec(), d)
        } else if other.numel() == 1 {
            let y = other.data()[0];
            (self.shape().to_vec(), self.data().iter().map(|&x| f(x, y)).collect())
        } else if self.numel() == 1 {
            let x = self.data()[0];
            (other.shape().to_vec(), other.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(TensorError::Shape {
                op: op_name,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        };
        Tensor::build(shape, data, Op::Elementwise(kind, self.clone(), other.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Elementwise::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Elementwise::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Elementwise::Mul)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::build(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows_cols("add_row_bias")?;
        if bias.numel() != n || bias.shape().len() != 1 {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        debug_assert_eq!(out.len(), m * n);
        Tensor::build(vec![m, n], out, Op::AddRowBias(self.clone(), bias.clone()))
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::build(self.shape().to_vec(), data, Op::Silu(self.clone()))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = self.rows_cols("softmax_rows")?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Tensor::build(self.shape().to_vec(), out, Op::SoftmaxRows(self.clone()))
    }

    /// Mean of squared differences.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op: "mse",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let n = self.numel() as f64;
        let s: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Tensor::build(vec![], vec![s / n], Op::Mse(self.clone(), other.clone()))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Tensor::build(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Value-identical constant: no adjoint flows back into `self`.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.shape().to_vec(),
            data: self.to_vec(),
            requires_grad: false,
            grad: RefCell::new(None),
            op: Op::Leaf,
        }))
    }

    /// `[m × a] ∥ [m × b] → [m × (a + b)]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (m, a) = self.rows_cols("concat_cols")?;
        let (m2, b) = other.rows_cols("concat_cols")?;
        if m != m2 {
            return Err(TensorError::Shape {
                op: "concat_cols",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            out.extend_from_slice(&self.data()[i * a..(i + 1) * a]);
            out.extend_from_slice(&other.data()[i * b..(i + 1) * b]);
        }
        Tensor::build(vec![m, a + b], out, Op::ConcatCols(self.clone(), other.clone()))
    }

    /// Stacks matrices (or vectors, treated as single rows) with equal width.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let width = *first.shape().last().unwrap_or(&1);
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = match p.shape() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                other => {
                    return Err(TensorError::Invalid {
                        op: "concat_rows",
                        msg: format!("unsupported shape {other:?}"),
                    })
                }
            };
            if c != width {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        Tensor::build(vec![rows, width], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.rows_cols("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {m} rows"),
                });
            }
            out.extend_from_slice(&self.data()[i * n..(i + 1) * n]);
        }
        Tensor::build(
            vec![indices.len(), n],
            out,
            Op::GatherRows(self.clone(), indices.to_vec()),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data()[i * n + j];
            }
        }
        Tensor::build(vec![n, m], out, Op::Transpose(self.clone()))
    }

    /// Column `j` of an `m × n` matrix, as a length-`m` vector.
    pub fn column(&self, j: usize) -> Result<Tensor> {
        let (m, n) = self.rows_cols("column")?;
        if j >= n {
            return Err(TensorError::Invalid {
                op: "column",
                msg: format!("column {j} out of range for {n} columns"),
            });
        }
        let out = (0..m).map(|i| self.data()[i * n + j]).collect();
        Tensor::build(vec![m], out, Op::Column(self.clone(), j))
    }

    /// Mean softmax cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (m, n) = self.rows_cols("cross_entropy")?;
        if labels.len() != m || labels.iter().any(|&l| l >= n) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {m} rows of {n} classes", labels.len()),
            });
        }
        let mut total = 0.0;
        for (row, &label) in self.data().chunks_exact(n).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        Tensor::build(
            vec![],
            vec![total / m as f64],
            Op::CrossEntropy(self.clone(), labels.to_vec()),
        )
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Adjoints are accumulated into the persistent grad buffer of every
    /// reachable node that requires a gradient, so two sweeps over the same
    /// graph double every gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut adjoints: HashMap<*const Node, Vec<f64>> = HashMap::new();
        adjoints.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = adjoints.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            node.propagate(&g, &mut adjoints);
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.0);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.op.parents() {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], adj: &mut HashMap<*const Node, Vec<f64>>) {
        fn send(adj: &mut HashMap<*const Node, Vec<f64>>, t: &Tensor, contrib: Vec<f64>) {
            if !t.requires_grad() {
                return;
            }
            match adj.get_mut(&Rc::as_ptr(&t.0)) {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                None => {
                    adj.insert(Rc::as_ptr(&t.0), contrib);
                }
            }
        }

        match &self.0.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, b.data(), &mut da, m, n, k);
                    send(adj, a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(a.data(), g, &mut db, k, m, n);
                    send(adj, b, db);
                }
            }
            Op::Elementwise(kind, a, b) => {
                let out_n = g.len();
                let expand = |t: &Tensor| -> Vec<f64> {
                    if t.numel() == out_n {
                        t.to_vec()
                    } else {
                        vec![t.data()[0]; out_n]
                    }
                };
                let reduce = |t: &Tensor, full: Vec<f64>| -> Vec<f64> {
                    if t.numel() == out_n {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                match kind {
                    Elementwise::Add => {
                        send(adj, a, reduce(a, g.to_vec()));
                        send(adj, b, reduce(b, g.to_vec()));
                    }
                    Elementwise::Sub => {
                        send(adj, a, reduce(a, g.to_vec()));
                        send(adj, b, reduce(b, g.iter().map(|x| -x).collect()));
                    }
                    Elementwise::Mul => {
                        if a.requires_grad() {
                            let bv = expand(b);
                            let da = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                            send(adj, a, reduce(a, da));
                        }
                        if b.requires_grad() {
                            let av = expand(a);
                            let db = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                            send(adj, b, reduce(b, db));
                        }
                    }
                }
            }
            Op::Scale(a, f) => send(adj, a, g.iter().map(|x| x * f).collect()),
            Op::AddRowBias(a, bias) => {
                send(adj, a, g.to_vec());
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    send(adj, bias, db);
                }
            }
            Op::Silu(a) => {
                let da = a
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let s = sigmoid(x);
                        gi * (s + x * s * (1.0 - s))
                    })
                    .collect();
                send(adj, a, da);
            }
            Op::SoftmaxRows(a) => {
                let n = a.shape()[1];
                let y = self.data();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(da.chunks_exact_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(adj, a, da);
            }
            Op::Mse(a, b) => {
                let scale = 2.0 * g[0] / a.numel() as f64;
                let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| scale * (x - y)).collect();
                if b.requires_grad() {
                    send(adj, b, diff.iter().map(|d| -d).collect());
                }
                send(adj, a, diff);
            }
            Op::Sum(a) => send(adj, a, vec![g[0]; a.numel()]),
            Op::ConcatCols(a, b) => {
                let (m, ca) = (a.shape()[0], a.shape()[1]);
                let cb = b.shape()[1];
                let mut da = Vec::with_capacity(m * ca);
                let mut db = Vec::with_capacity(m * cb);
                for row in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(adj, a, da);
                send(adj, b, db);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.numel();
                    send(adj, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = a.shape()[1];
                let mut da = vec![0.0; a.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[r * n + j];
                    }
                }
                send(adj, a, da);
            }
            Op::Transpose(a) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                send(adj, a, da);
            }
            Op::Column(a, j) => {
                let n = a.shape()[1];
                let mut da = vec![0.0; a.numel()];
                for (i, gi) in g.iter().enumerate() {
                    da[i * n + j] = *gi;
                }
                send(adj, a, da);
            }
            Op::CrossEntropy(a, labels) => {
                let n = a.shape()[1];
                let m = labels.len() as f64;
                let mut da = a.to_vec();
                for (row, &label) in da.chunks_exact_mut(n).zip(labels) {
                    softmax_in_place(row);
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= g[0] / m);
                }
                send(adj, a, da);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the node index is a topological order
//! and the backward sweep simply walks the record from the root down.

use std::cell::{Cell, Ref, RefCell};

use super::matrix::Matrix;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddConst(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    SqNorm(usize),
    L1(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    RowNormalize(usize, f64),
    ConcatRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Computation record. Single-threaded; build one per gradient evaluation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kink: Cell<f64>,
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kink: Cell::new(f64::INFINITY),
        }
    }

    /// Leaf node; differentiable if passed in `wrt`.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Leaf node that is never asked for a gradient. Identical to [`Tape::var`]
    /// on the record, kept separate for readability at call sites.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest |input| seen by a non-differentiable point (relu, l1) so far.
    /// Finite-difference checks are only meaningful when this exceeds the step.
    pub fn min_kink_distance(&self) -> f64 {
        self.kink.get()
    }

    fn note_kink(&self, m: &Matrix) {
        let d = m.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        self.kink.set(self.kink.get().min(d));
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar root; returns ∂root/∂p for each `wrt`.
    /// `wrt` entries are expected to be leaves; parameters that do not reach
    /// the root get a zero matrix of their own shape.
    pub fn gradient(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Matrix>> {
        self.check_owner(root)?;
        for v in wrt {
            self.check_owner(*v)?;
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requires a 1x1 root, got {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.id + 1];
        grads[root.id] = Some(Matrix::scalar(1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(*b))?;
                    let gb = val(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b, bc) => {
                    let gb = reduce_broadcast(&g, *bc, val(*b));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b, bc) => {
                    let gb = reduce_broadcast(&g, *bc, val(*b)).scale(-1.0);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b, bc) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * broadcast_get(bv, *bc, i, j));
                    let full = g.hadamard(av)?;
                    let gb = reduce_broadcast(&full, *bc, bv);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = g.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.hadamard(&node.value)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(val(*a), "log", |g, x| g / x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SqNorm(a) => {
                    let s = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, *a, val(*a).scale(s));
                }
                Op::L1(a) => {
                    let s = g.get(0, 0);
                    let ga = val(*a).map(|x| {
                        if x > 0.0 {
                            s
                        } else if x < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..y.cols() {
                            ga.set(i, j, yr[j] * (gr[j] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gr = g.row(i);
                        let total: f64 = gr.iter().sum();
                        for (j, ly) in y.row(i).iter().enumerate() {
                            ga.set(i, j, gr[j] - ly.exp() * total);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, floor) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.row(i);
                        if norm <= *floor {
                            for j in 0..x.cols() {
                                ga.set(i, j, gr[j] / floor);
                            }
                        } else {
                            let yr = y.row(i);
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..x.cols() {
                                ga.set(i, j, (gr[j] - yr[j] * dot) / norm);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = val(p).rows();
                        let idx: Vec<usize> = (offset..offset + r).collect();
                        accumulate(&mut grads, p, g.select_rows(&idx));
                        offset += r;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, g.reshaped(r, c)?);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|v| {
                grads[..].get(v.id).and_then(|g| g.clone()).unwrap_or_else(|| {
                    let (r, c) = nodes[v.id].value.shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_get(b: &Matrix, bc: Bcast, i: usize, j: usize) -> f64 {
    match bc {
        Bcast::Same => b.get(i, j),
        Bcast::Scalar => b.get(0, 0),
        Bcast::Row => b.get(0, j),
    }
}

fn reduce_broadcast(g: &Matrix, bc: Bcast, b: &Matrix) -> Matrix {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Matrix::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Matrix::zeros(1, b.cols());
            for i in 0..g.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            out
        }
    }
}

fn broadcast_kind(op: &'static str, a: &Matrix, b: &Matrix) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.shape() == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Bcast::Row)
    } else {
        Err(dim_err(op, format!("{:?} with {:?}", a.shape(), b.shape())))
    }
}

fn finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        self.tape.value_ref(self.id).get(0, 0)
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands belong to different tapes".into()))
        }
    }

    fn unary(&self, op: &'static str, f: impl FnOnce(&Matrix) -> Result<Matrix>, node: Op) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_ref(self.id);
            finite(op, f(&x)?)?
        };
        Ok(self.tape.push(out, node))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            finite("matmul", a.matmul(&b)?)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        self.unary("transpose", |x| Ok(x.transpose()), Op::Transpose(self.id))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (out, bc) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            let bc = broadcast_kind(op, &a, &b)?;
            let out = Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), broadcast_get(&b, bc, i, j)));
            (finite(op, out)?, bc)
        };
        Ok(self.tape.push(out, make(self.id, other.id, bc)))
    }

    /// Elementwise sum; `other` may also be 1x1 or a single row.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| Ok(x.scale(s)), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| Ok(x.map(|v| v + s)), Op::AddConst(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", |x| Ok(Matrix::scalar(x.sum())), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(
            "mean",
            |x| {
                if x.is_empty() {
                    Err(Error::Domain {
                        op: "mean",
                        detail: "empty matrix".into(),
                    })
                } else {
                    Ok(Matrix::scalar(x.sum() / x.len() as f64))
                }
            },
            Op::Mean(self.id),
        )
    }

    /// n x m -> n x 1 row sums.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.unary(
            "sum_rows",
            |x| Ok(Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum())),
            Op::SumRows(self.id),
        )
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        {
            let x = self.tape.value_ref(self.id);
            self.tape.note_kink(&x);
        }
        self.unary("relu", |x| Ok(x.map(|v| v.max(0.0))), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", |x| Ok(x.map(sigmoid)), Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", |x| Ok(x.map(f64::exp)), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(
            "log",
            |x| {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    })
                } else {
                    Ok(x.map(f64::ln))
                }
            },
            Op::Log(self.id),
        )
    }

    /// Sum of squared entries; the l2 norm squared for vectors and the squared
    /// Frobenius norm for matrices.
    pub fn sq_norm(&self) -> Result<Var<'t>> {
        self.unary("sq_norm", |x| Ok(Matrix::scalar(x.frobenius_sq())), Op::SqNorm(self.id))
    }

    pub fn frobenius_sq(&self) -> Result<Var<'t>> {
        self.sq_norm()
    }

    /// Sum of absolute values; subgradient 0 at exactly 0.
    pub fn l1(&self) -> Result<Var<'t>> {
        {
            let x = self.tape.value_ref(self.id);
            self.tape.note_kink(&x);
        }
        self.unary(
            "l1",
            |x| Ok(Matrix::scalar(x.data().iter().map(|v| v.abs()).sum())),
            Op::L1(self.id),
        )
    }

    /// Numerically stable softmax of each row.
    pub fn row_softmax(&self) -> Result<Var<'t>> {
        self.unary("row_softmax", |x| Ok(row_softmax(x)), Op::RowSoftmax(self.id))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn row_log_softmax(&self) -> Result<Var<'t>> {
        self.unary(
            "row_log_softmax",
            |x| {
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (j, v) in row.iter().enumerate() {
                        out.set(i, j, v - lse);
                    }
                }
                Ok(out)
            },
            Op::RowLogSoftmax(self.id),
        )
    }

    /// Divides each row by max(‖row‖₂, floor).
    pub fn row_normalize(&self, floor: f64) -> Result<Var<'t>> {
        self.unary(
            "row_normalize",
            |x| {
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
                    for j in 0..x.cols() {
                        out.set(i, j, x.get(i, j) / n);
                    }
                }
                Ok(out)
            },
            Op::RowNormalize(self.id, floor),
        )
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.unary("reshape", |x| x.clone().reshaped(rows, cols), Op::Reshape(self.id))
    }

    /// Rows `idx` of `self`, in that order (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let rows = self.shape().0;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err("select_rows", format!("row {bad} of {rows}")));
        }
        self.unary(
            "select_rows",
            |x| Ok(x.select_rows(idx)),
            Op::SelectRows(self.id, idx.to_vec()),
        )
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let tape = first.tape;
        let out = {
            let vals: Vec<Ref<'_, Matrix>> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|r| &**r).collect();
            Matrix::vstack(&refs)?
        };
        Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    // both branches share one exp so the select compiles branch-free
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

pub(crate) fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}

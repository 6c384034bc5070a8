//! Reverse-mode automatic differentiation over matrices.
//!
//! Operations are evaluated eagerly as they are recorded, so every node's
//! value is available immediately. [`Tape::backward`] propagates from a
//! `1 × 1` loss node back to the parameters in a [`ParamStore`]; nodes that
//! do not depend on any trainable input are never visited.
//!
//! Binary element-wise operations broadcast in both dimensions: each operand
//! dimension must either match the other operand or be 1.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{gemm, Matrix};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: usize,
}

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// The four parameter groups of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Group {
    /// Decoder (θ), including the gyroplanes.
    Decoder,
    /// Encoder (φ): displacement head F and implicit sampler G.
    Encoder,
    /// Dual function (ψ).
    Dual,
    /// VampPrior pseudo-inputs (δ).
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
    /// `atanh` with its argument clamped to `[-lim, lim]`.
    Atanh(f64),
    Asinh,
    Softplus,
    LogSinhc,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Binary { a: usize, b: usize, kind: Binary },
    Unary { a: usize, kind: Unary },
    SumRows(usize),
    SumCols(usize),
    Sum(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Gather { a: usize, idx: Vec<usize> },
    ScatterAdd { a: usize, idx: Vec<usize> },
    PickLogSoftmax { a: usize, targets: Vec<Option<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Exp => "exp",
                Unary::Ln => "ln",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Recip => "recip",
                Unary::Atanh(_) => "atanh",
                Unary::Asinh => "asinh",
                Unary::Softplus => "softplus",
                Unary::LogSinhc => "log_sinhc",
                Unary::Clamp(..) => "clamp",
            },
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gather { .. } => "gather_rows",
            Op::ScatterAdd { .. } => "scatter_add_rows",
            Op::PickLogSoftmax { .. } => "pick_log_softmax",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a loss with respect to every node that needed one.
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

#[inline]
fn bidx(r: usize, c: usize, shape: (usize, usize)) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), first_non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx, tape: self.id }
    }

    #[inline]
    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    #[inline]
    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Returns an error naming the first node whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(node) => Err(Error::NonFinite { node, op: self.nodes[node].op.name() }),
            None => Ok(()),
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// Copies a parameter onto the tape; gradients reach the store only if
    /// `trainable` is set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), trainable)
    }

    /// Same value as `v`, cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let m = if ta { va.cols() } else { va.rows() };
        let n = if tb { vb.rows() } else { vb.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(va, ta, vb, tb, &mut out, 0.0);
        let ng = self.ng(ia) || self.ng(ib);
        self.push(out, Op::MatMul { a: ia, b: ib, ta, tb }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
            Matrix::from_vec(va.rows(), va.cols(), data)
        } else {
            let (sa, sb) = (va.shape(), vb.shape());
            let (r, c) = broadcast_shape(sa, sb);
            let (da, db) = (va.as_slice(), vb.as_slice());
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(da[bidx(i, j, sa)], db[bidx(i, j, sb)]));
                }
            }
            Matrix::from_vec(r, c, data)
        };
        let ng = self.ng(ia) || self.ng(ib);
        self.push(out, Op::Binary { a: ia, b: ib, kind }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|x| match kind {
            Unary::Neg => -x,
            Unary::Scale(k) => k * x,
            Unary::AddScalar(k) => x + k,
            Unary::Tanh => math::tanh(x),
            Unary::Sigmoid => math::sigmoid(x),
            Unary::Exp => math::exp(x),
            Unary::Ln => math::log(x),
            Unary::Sqrt => math::sqrt(x),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Atanh(lim) => math::atanh(x.clamp(-lim, lim)),
            Unary::Asinh => math::asinh(x),
            Unary::Softplus => math::softplus(x),
            Unary::LogSinhc => math::log_sinhc(x),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        });
        let ng = self.ng(ia);
        self.push(out, Op::Unary { a: ia, kind }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Unary::Scale(k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Unary::AddScalar(k))
    }

    /// `k − a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// `atanh` with the argument clamped to `[-lim, lim]`; the gradient is
    /// zero where the clamp is active.
    pub fn atanh_clamped(&mut self, a: Var, lim: f64) -> Var {
        self.unary(a, Unary::Atanh(lim))
    }

    pub fn asinh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Asinh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// `ln(sinh(x)/x)`.
    pub fn log_sinhc(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSinhc)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    pub fn clamp_max(&mut self, a: Var, hi: f64) -> Var {
        self.clamp(a, f64::NEG_INFINITY, hi)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let out = Matrix::from_vec(v.rows(), 1, data);
        let ng = self.ng(ia);
        self.push(out, Op::SumRows(ia), ng)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let mut out = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let ng = self.ng(ia);
        self.push(out, Op::SumCols(ia), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.as_slice().iter().sum();
        let ng = self.ng(ia);
        self.push(Matrix::scalar(s), Op::Sum(ia), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise inner products: `m × n, m × n → m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_rows(p)
    }

    /// Row-wise squared norms.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.sum_rows(s)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let rows = self.nodes[idx[0]].value.rows();
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idx {
                let v = &self.nodes[i].value;
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.row_slice_mut(r)[off..off + v.cols()].copy_from_slice(v.row_slice(r));
                off += v.cols();
            }
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        self.push(out, Op::ConcatCols(idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let cols = self.nodes[idx[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(idx), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_slice_mut(r).copy_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let ng = self.ng(ia);
        self.push(out, Op::SliceCols { a: ia, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let out = Matrix::from_vec(len, c, v.as_slice()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(ia);
        self.push(out, Op::SliceRows { a: ia, start }, ng)
    }

    /// Row lookup: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < v.rows(), "gather_rows index {i} out of range");
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Matrix::from_vec(idx.len(), c, data);
        let ng = self.ng(ia);
        self.push(out, Op::Gather { a: ia, idx }, ng)
    }

    /// Row accumulation: `out[idx[i]] += a[i]`, with `rows` output rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert_eq!(idx.len(), v.rows(), "scatter index length");
        let mut out = Matrix::zeros(rows, v.cols());
        for (r, &dst) in idx.iter().enumerate() {
            for (o, x) in out.row_slice_mut(dst).iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let ng = self.ng(ia);
        self.push(out, Op::ScatterAdd { a: ia, idx }, ng)
    }

    /// Row-wise `log softmax(a)[target]`; rows with no target produce 0 and
    /// receive no gradient.
    pub fn pick_log_softmax(&mut self, a: Var, targets: Vec<Option<usize>>) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        assert_eq!(targets.len(), v.rows(), "one target per row");
        let mut out = Matrix::zeros(v.rows(), 1);
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = v.row_slice(r);
                out.set(r, 0, row[t] - math::log_sum_exp(row));
            }
        }
        let ng = self.ng(ia);
        self.push(out, Op::PickLogSoftmax { a: ia, targets }, ng)
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::State(String::from("backward on a variable that was not recorded on this tape")));
        }
        self.check_finite()?;
        if self.nodes[loss.idx].value.shape() != (1, 1) {
            return Err(Error::InvalidArgument(String::from("backward needs a 1x1 loss")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Accumulates `d loss / d param` into the store's gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.idx + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                if node.needs_grad {
                    store.params[id.0].grad.add_assign(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.ng(a) {
                    let ga = slot(grads, a, va.shape());
                    if ta {
                        gemm(vb, tb, g, true, ga, 1.0);
                    } else {
                        gemm(g, false, vb, !tb, ga, 1.0);
                    }
                }
                if self.ng(b) {
                    let gb = slot(grads, b, vb.shape());
                    if tb {
                        gemm(g, true, va, ta, gb, 1.0);
                    } else {
                        gemm(va, !ta, g, false, gb, 1.0);
                    }
                }
            }
            Op::Binary { a, b, kind } => {
                let (a, b, kind) = (*a, *b, *kind);
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (sa, sb) = (va.shape(), vb.shape());
                let (r, c) = y.shape();
                let (da, db, dg) = (va.as_slice(), vb.as_slice(), g.as_slice());
                if self.ng(a) {
                    let mut acc = Matrix::zeros(sa.0, sa.1);
                    {
                        let out = acc.as_mut_slice();
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                let ib = bidx(i, j, sb);
                                let d = match kind {
                                    Binary::Add | Binary::Sub => dg[k],
                                    Binary::Mul => dg[k] * db[ib],
                                    Binary::Div => dg[k] / db[ib],
                                };
                                out[bidx(i, j, sa)] += d;
                            }
                        }
                    }
                    slot(grads, a, sa).add_assign(&acc);
                }
                if self.ng(b) {
                    let mut acc = Matrix::zeros(sb.0, sb.1);
                    {
                        let out = acc.as_mut_slice();
                        let dy = y.as_slice();
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                let ia = bidx(i, j, sa);
                                let d = match kind {
                                    Binary::Add => dg[k],
                                    Binary::Sub => -dg[k],
                                    Binary::Mul => dg[k] * da[ia],
                                    Binary::Div => -dg[k] * dy[k] / db[bidx(i, j, sb)],
                                };
                                out[bidx(i, j, sb)] += d;
                            }
                        }
                    }
                    slot(grads, b, sb).add_assign(&acc);
                }
            }
            Op::Unary { a, kind } => {
                let a = *a;
                let x = &self.nodes[a].value;
                let ga = slot(grads, a, x.shape());
                let (xs, ys, gs) = (x.as_slice(), y.as_slice(), g.as_slice());
                for (k, out) in ga.as_mut_slice().iter_mut().enumerate() {
                    let (xv, yv, gv) = (xs[k], ys[k], gs[k]);
                    *out += match *kind {
                        Unary::Neg => -gv,
                        Unary::Scale(s) => s * gv,
                        Unary::AddScalar(_) => gv,
                        Unary::Tanh => gv * (1.0 - yv * yv),
                        Unary::Sigmoid => gv * yv * (1.0 - yv),
                        Unary::Exp => gv * yv,
                        Unary::Ln => gv / xv,
                        Unary::Sqrt => {
                            if yv > 0.0 {
                                gv / (2.0 * yv)
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xv * gv,
                        Unary::Recip => -gv * yv * yv,
                        Unary::Atanh(lim) => {
                            if xv.abs() <= lim {
                                gv / (1.0 - xv * xv)
                            } else {
                                0.0
                            }
                        }
                        Unary::Asinh => gv / math::sqrt(1.0 + xv * xv),
                        Unary::Softplus => gv * math::sigmoid(xv),
                        Unary::LogSinhc => gv * math::log_sinhc_grad(xv),
                        Unary::Clamp(lo, hi) => {
                            if xv >= lo && xv <= hi {
                                gv
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            Op::SumRows(a) => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                let c = ga.cols();
                for r in 0..ga.rows() {
                    let gr = g.get(r, 0);
                    for v in &mut ga.as_mut_slice()[r * c..(r + 1) * c] {
                        *v += gr;
                    }
                }
            }
            Op::SumCols(a) => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                for r in 0..ga.rows() {
                    for (v, gc) in ga.row_slice_mut(r).iter_mut().zip(g.as_slice()) {
                        *v += gc;
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                for v in ga.as_mut_slice() {
                    *v += gv;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.nodes[p].value.shape();
                    if self.ng(p) {
                        let gp = slot(grads, p, shape);
                        for r in 0..shape.0 {
                            for (v, x) in gp.row_slice_mut(r).iter_mut().zip(&g.row_slice(r)[off..off + shape.1]) {
                                *v += x;
                            }
                        }
                    }
                    off += shape.1;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let c = g.cols();
                for &p in parts {
                    let shape = self.nodes[p].value.shape();
                    if self.ng(p) {
                        let gp = slot(grads, p, shape);
                        for (v, x) in gp.as_mut_slice().iter_mut().zip(&g.as_slice()[off * c..(off + shape.0) * c]) {
                            *v += x;
                        }
                    }
                    off += shape.0;
                }
            }
            Op::SliceCols { a, start } => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    for (v, x) in ga.row_slice_mut(r)[*start..*start + len].iter_mut().zip(g.row_slice(r)) {
                        *v += x;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                let c = g.cols();
                for (v, x) in ga.as_mut_slice()[start * c..(start + g.rows()) * c].iter_mut().zip(g.as_slice()) {
                    *v += x;
                }
            }
            Op::Gather { a, idx } => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (v, x) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                        *v += x;
                    }
                }
            }
            Op::ScatterAdd { a, idx } => {
                let ga = slot(grads, *a, self.nodes[*a].value.shape());
                for (r, &dst) in idx.iter().enumerate() {
                    for (v, x) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(dst)) {
                        *v += x;
                    }
                }
            }
            Op::PickLogSoftmax { a, targets } => {
                let x = &self.nodes[*a].value;
                let ga = slot(grads, *a, x.shape());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let gr = g.get(r, 0);
                    let row = x.row_slice(r);
                    let lse = math::log_sum_exp(row);
                    let out = ga.row_slice_mut(r);
                    for (j, v) in out.iter_mut().enumerate() {
                        let p = math::exp(row[j] - lse);
                        *v -= gr * p;
                    }
                    out[t] += gr;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], i: usize, shape: (usize, usize)) -> &mut Matrix {
    grads[i].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// A named, grouped trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Owner of every trainable tensor of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles of every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param { name: name.into(), group, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Puts every parameter on the tape; only groups accepted by
    /// `trainable` receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars =
            self.params.iter().enumerate().map(|(i, p)| tape.param(self, ParamId(i), trainable(p.group))).collect();
        Bound { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds another store's gradient accumulators into this one. Both stores
    /// must hold the same parameters.
    pub fn merge_grads(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::InvalidArgument(String::from("parameter stores differ in size")));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.name != q.name || p.grad.shape() != q.grad.shape() {
                return Err(Error::InvalidArgument(alloc::format!("parameter {} does not match {}", p.name, q.name)));
            }
            p.grad.add_assign(&q.grad);
        }
        Ok(())
    }

    /// Euclidean norm of the gradients of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        math::sqrt(ids.iter().map(|id| self.params[id.0].grad.sq_sum()).sum())
    }

    /// Rescales the gradients of `ids` so their joint norm is at most
    /// `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.grad_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for id in ids {
                self.params[id.0].grad.scale_assign(k);
            }
        }
        norm
    }

    /// Stable 64-bit FNV-1a fingerprint of the values in `groups`.
    pub fn fingerprint(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            for v in p.value.as_slice() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Compares the tape gradient of `f` at `point` against a five-point
/// central difference with step `h`, coordinate by coordinate. Returns the
/// largest `|g_tape − g_fd| / max(|g_tape|, 1e-8)`.
pub fn gradient_check(f: impl Fn(&mut Tape, Var) -> Var, point: &Matrix, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x);
    let grads = tape.gradients(loss)?;
    let zero = Matrix::zeros(point.rows(), point.cols());
    let analytic = grads.get(x).unwrap_or(&zero).clone();

    let eval = |p: &Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let l = f(&mut t, x);
        t.check_finite()?;
        Ok(t.scalar(l))
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let x0 = point.as_slice()[k];
        let mut at = |dx: f64| -> Result<f64> {
            probe.as_mut_slice()[k] = x0 + dx;
            let v = eval(&probe);
            probe.as_mut_slice()[k] = x0;
            v
        };
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        let fd = (8.0 * near - far) / (12.0 * h);
        let g = analytic.as_slice()[k];
        worst = worst.max((g - fd).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}

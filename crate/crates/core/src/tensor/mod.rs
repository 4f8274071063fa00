//! A small reverse-mode automatic differentiation engine over rank-2 `f64`
//! tensors.
//!
//! Every operation returns a new [`Tensor`] whose op record points at its
//! parents. Node ids grow monotonically on the creating thread, so sorting
//! the reachable nodes by descending id gives a valid reverse topological
//! order (the tape). Dropping the loss tensor releases the whole graph.
//! Vectors are `1×n` and scalars are `1×1`.

mod gradcheck;
mod matrix;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use gradcheck::finite_diff_check;
pub use matrix::{argmax, Matrix};

use crate::error::{Error, Result};
use matrix::{matmul_nn, matmul_nt, matmul_tn};

/// Guard applied inside norms and log arguments.
pub const EPS: f64 = 1e-12;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Debug)]
enum Op {
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    DivScalar,
    Scale(f64),
    AddScalar,
    ConcatRows,
    Relu,
    Exp,
    Log,
    Abs,
    SoftmaxRows,
    Sum,
    Mean,
    RowSums,
    ColSums,
    L1Norm,
    L2Norm,
    NormalizeRows,
    LogSumExpMasked(Rc<[bool]>),
}

struct OpRecord {
    op: Op,
    parents: Vec<Tensor>,
}

struct Node {
    id: u64,
    value: Matrix,
    grad: RefCell<Option<Vec<f64>>>,
    record: Option<OpRecord>,
    requires_grad: bool,
}

/// Reference-counted handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("values", &self.values())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.record.as_ref().map(|r| &r.op))
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Matrix, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            record: None,
            requires_grad,
        }))
    }

    fn from_op(value: Matrix, op: Op, parents: Vec<Tensor>) -> Tensor {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let record = requires_grad.then_some(OpRecord { op, parents });
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            record,
            requires_grad,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(value: Matrix) -> Tensor {
        Tensor::leaf(value, false)
    }

    /// Leaf tensor that accumulates gradient.
    pub fn parameter(value: Matrix) -> Tensor {
        Tensor::leaf(value, true)
    }

    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::constant(Matrix::new(rows, cols, values)?))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        Ok(Tensor::constant(Matrix::from_rows(rows)?))
    }

    pub fn vector(values: Vec<f64>) -> Tensor {
        Tensor::constant(Matrix::row_vector(values))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(Matrix::row_vector(vec![value]))
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.0.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.cols()
    }

    pub fn len(&self) -> usize {
        self.0.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn has_op_record(&self) -> bool {
        self.0.record.is_some()
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient with unreached entries reported as zero.
    pub fn grad_or_zero(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> Result<f64> {
        self.expect_scalar("item")?;
        Ok(self.values()[0])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    fn expect_scalar(&self, op: &'static str) -> Result<()> {
        if self.shape() != [1, 1] {
            return Err(Error::contract(format!(
                "{op} needs a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data = self.values().iter().map(|&v| f(v)).collect();
        Matrix::new(self.rows(), self.cols(), data).expect("same shape")
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::new(self.rows(), self.cols(), data).expect("same shape")
    }

    // ---- linear family -------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let value = self.matrix().matmul(other.matrix())?;
        Ok(Tensor::from_op(value, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    /// `self · otherᵀ`, the shape of a dense layer with `out×in` weights.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let value = self.matrix().matmul_nt(other.matrix())?;
        Ok(Tensor::from_op(value, Op::MatMulNt, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_op(self.matrix().transpose(), Op::Transpose, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let value = self.zip(other, |a, b| a + b);
        Ok(Tensor::from_op(value, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let value = self.zip(other, |a, b| a - b);
        Ok(Tensor::from_op(value, Op::Sub, vec![self.clone(), other.clone()]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let value = self.zip(other, |a, b| a * b);
        Ok(Tensor::from_op(value, Op::Mul, vec![self.clone(), other.clone()]))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let value = self.zip(other, |a, b| a / b);
        Ok(Tensor::from_op(value, Op::Div, vec![self.clone(), other.clone()]))
    }

    /// Adds a `1×n` row to every row of an `m×n` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let n = self.cols();
        let data = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + row.values()[i % n])
            .collect();
        let value = Matrix::new(self.rows(), n, data)?;
        Ok(Tensor::from_op(value, Op::AddRow, vec![self.clone(), row.clone()]))
    }

    /// Divides every entry by a `1×1` tensor.
    pub fn div_scalar(&self, denom: &Tensor) -> Result<Tensor> {
        if denom.shape() != [1, 1] {
            return Err(Error::Shape {
                op: "div_scalar",
                left: self.shape(),
                right: denom.shape(),
            });
        }
        let d = denom.values()[0];
        let value = self.map(|v| v / d);
        Ok(Tensor::from_op(value, Op::DivScalar, vec![self.clone(), denom.clone()]))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::from_op(self.map(|v| v * factor), Op::Scale(factor), vec![self.clone()])
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        Tensor::from_op(self.map(|v| v + offset), Op::AddScalar, vec![self.clone()])
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(p.values());
            rows += p.rows();
        }
        let value = Matrix::new(rows, cols, data)?;
        Ok(Tensor::from_op(value, Op::ConcatRows, parts.to_vec()))
    }

    // ---- nonlinear family ----------------------------------------------

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.map(|v| v.max(0.0)), Op::Relu, vec![self.clone()])
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.map(f64::exp), Op::Exp, vec![self.clone()])
    }

    /// Natural log of `max(x, EPS)`. Negative (or NaN) inputs are rejected.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.values().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain { op: "log", value: bad });
        }
        let value = self.map(|v| v.max(EPS).ln());
        Ok(Tensor::from_op(value, Op::Log, vec![self.clone()]))
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(self.map(f64::abs), Op::Abs, vec![self.clone()])
    }

    pub fn softmax_rows(&self) -> Tensor {
        let cols = self.cols();
        let mut data = Vec::with_capacity(self.len());
        for r in 0..self.rows() {
            let row = self.matrix().row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let value = Matrix::new(self.rows(), cols, data).expect("same shape");
        Tensor::from_op(value, Op::SoftmaxRows, vec![self.clone()])
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::from_op(Matrix::row_vector(vec![s]), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let m = s / self.len() as f64;
        Tensor::from_op(Matrix::row_vector(vec![m]), Op::Mean, vec![self.clone()])
    }

    /// Per-row sums as an `m×1` column.
    pub fn row_sums(&self) -> Tensor {
        let data = (0..self.rows())
            .map(|r| self.matrix().row(r).iter().sum())
            .collect();
        let value = Matrix::new(self.rows(), 1, data).expect("column");
        Tensor::from_op(value, Op::RowSums, vec![self.clone()])
    }

    /// Per-column sums as a `1×n` row.
    pub fn col_sums(&self) -> Tensor {
        let n = self.cols();
        let mut data = vec![0.0; n];
        for (i, &v) in self.values().iter().enumerate() {
            data[i % n] += v;
        }
        Tensor::from_op(Matrix::row_vector(data), Op::ColSums, vec![self.clone()])
    }

    pub fn l1_norm(&self) -> Tensor {
        let s = self.values().iter().map(|v| v.abs()).sum();
        Tensor::from_op(Matrix::row_vector(vec![s]), Op::L1Norm, vec![self.clone()])
    }

    /// Euclidean norm of all entries, floored at `EPS`.
    pub fn l2_norm(&self) -> Tensor {
        let n = self.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(Matrix::row_vector(vec![n.max(EPS)]), Op::L2Norm, vec![self.clone()])
    }

    /// Scales each row to unit length, with the norm floored at `EPS`.
    pub fn normalize_rows(&self) -> Tensor {
        let cols = self.cols();
        let mut data = Vec::with_capacity(self.len());
        for r in 0..self.rows() {
            let row = self.matrix().row(r);
            let norm = row_norm(row);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Matrix::new(self.rows(), cols, data).expect("same shape");
        Tensor::from_op(value, Op::NormalizeRows, vec![self.clone()])
    }

    /// `log Σ_{j: mask[i,j]} exp(x[i,j])` for every row `i`, as an `m×1`
    /// column. Every row must select at least one entry.
    pub fn logsumexp_masked(&self, mask: &[bool]) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(Error::contract(format!(
                "logsumexp mask has {} entries for shape {:?}",
                mask.len(),
                self.shape()
            )));
        }
        let cols = self.cols();
        let mut data = Vec::with_capacity(self.rows());
        for r in 0..self.rows() {
            let row = self.matrix().row(r);
            let sel = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "logsumexp row {r} selects no entries"
                )));
            }
            let total: f64 = row
                .iter()
                .zip(sel)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            data.push(max + total.ln());
        }
        let value = Matrix::new(self.rows(), 1, data)?;
        Ok(Tensor::from_op(
            value,
            Op::LogSumExpMasked(mask.into()),
            vec![self.clone()],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates `∂self/∂x` into every reachable tensor `x` that requires
    /// gradient. Repeated calls add up.
    pub fn backward(&self) -> Result<()> {
        self.expect_scalar("backward")?;
        if !self.requires_grad() {
            return Ok(());
        }

        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(rec) = &t.0.record {
                stack.extend(rec.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for t in &order {
            let Some(g) = pending.remove(&t.0.id) else {
                continue;
            };
            if let Some(rec) = &t.0.record {
                let local = local_grads(&rec.op, &rec.parents, &t.0.value, &g);
                for (parent, pg) in rec.parents.iter().zip(local) {
                    let Some(pg) = pg else { continue };
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Cosine similarity of two `1×n` vectors, as a `1×1` tensor.
pub fn cosine_sim(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.rows() != 1 || u.shape() != v.shape() {
        return Err(Error::Shape {
            op: "cosine_sim",
            left: u.shape(),
            right: v.shape(),
        });
    }
    Ok(u.normalize_rows().mul(&v.normalize_rows())?.sum())
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.normalize_rows().matmul_nt(&b.normalize_rows())
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS)
}

fn local_grads(op: &Op, parents: &[Tensor], out: &Matrix, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| parents[i].requires_grad();
    let unary = |f: &dyn Fn() -> Vec<f64>| vec![want(0).then(f)];
    let x = |i: usize| parents[i].values();
    let [m, n] = out.shape();

    match op {
        Op::MatMul => {
            let [am, ak] = parents[0].shape();
            let bn = parents[1].cols();
            vec![
                want(0).then(|| matmul_nt(g, x(1), am, bn, ak)),
                want(1).then(|| matmul_tn(x(0), g, am, ak, bn)),
            ]
        }
        Op::MatMulNt => {
            // out = A·Bᵀ, A: m×k, B: n×k
            let [am, ak] = parents[0].shape();
            let bn = parents[1].rows();
            vec![
                want(0).then(|| matmul_nn(g, x(1), am, bn, ak)),
                want(1).then(|| matmul_tn(g, x(0), am, bn, ak)),
            ]
        }
        Op::Transpose => unary(&|| {
            let mut t = vec![0.0; g.len()];
            for r in 0..m {
                for c in 0..n {
                    t[c * m + r] = g[r * n + c];
                }
            }
            t
        }),
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul => vec![
            want(0).then(|| g.iter().zip(x(1)).map(|(g, b)| g * b).collect()),
            want(1).then(|| g.iter().zip(x(0)).map(|(g, a)| g * a).collect()),
        ],
        Op::Div => vec![
            want(0).then(|| g.iter().zip(x(1)).map(|(g, b)| g / b).collect()),
            want(1).then(|| {
                g.iter()
                    .zip(x(0))
                    .zip(x(1))
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect()
            }),
        ],
        Op::AddRow => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| {
                let mut acc = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    acc[i % n] += v;
                }
                acc
            }),
        ],
        Op::DivScalar => {
            let d = x(1)[0];
            vec![
                want(0).then(|| g.iter().map(|v| v / d).collect()),
                want(1).then(|| {
                    let s: f64 = g.iter().zip(x(0)).map(|(g, a)| g * a).sum();
                    vec![-s / (d * d)]
                }),
            ]
        }
        Op::Scale(c) => unary(&|| g.iter().map(|v| v * c).collect()),
        Op::AddScalar => unary(&|| g.to_vec()),
        Op::ConcatRows => {
            let mut offset = 0;
            parents
                .iter()
                .map(|p| {
                    let len = p.len();
                    let slice = &g[offset..offset + len];
                    offset += len;
                    p.requires_grad().then(|| slice.to_vec())
                })
                .collect()
        }
        Op::Relu => unary(&|| {
            g.iter()
                .zip(x(0))
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect()
        }),
        Op::Exp => unary(&|| g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
        Op::Log => unary(&|| {
            g.iter()
                .zip(x(0))
                .map(|(g, v)| if *v > EPS { g / v } else { 0.0 })
                .collect()
        }),
        Op::Abs | Op::L1Norm => {
            let gv = |i: usize| if matches!(op, Op::L1Norm) { g[0] } else { g[i] };
            unary(&|| {
                x(0).iter()
                    .enumerate()
                    .map(|(i, v)| gv(i) * sign(*v))
                    .collect()
            })
        }
        Op::SoftmaxRows => unary(&|| {
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..m {
                let range = r * n..(r + 1) * n;
                let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                for i in range {
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            dx
        }),
        Op::Sum => unary(&|| vec![g[0]; parents[0].len()]),
        Op::Mean => unary(&|| {
            let len = parents[0].len();
            vec![g[0] / len as f64; len]
        }),
        Op::RowSums => unary(&|| {
            let cols = parents[0].cols();
            (0..parents[0].len()).map(|i| g[i / cols]).collect()
        }),
        Op::ColSums => unary(&|| {
            let cols = parents[0].cols();
            (0..parents[0].len()).map(|i| g[i % cols]).collect()
        }),
        Op::L2Norm => unary(&|| {
            let norm = out.data()[0];
            let raw = x(0).iter().map(|v| v * v).sum::<f64>().sqrt();
            if raw > EPS {
                x(0).iter().map(|v| g[0] * v / norm).collect()
            } else {
                vec![0.0; parents[0].len()]
            }
        }),
        Op::NormalizeRows => unary(&|| {
            let xs = x(0);
            let y = out.data();
            let mut dx = vec![0.0; xs.len()];
            for r in 0..m {
                let range = r * n..(r + 1) * n;
                let raw = xs[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw > EPS {
                    let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                    for i in range {
                        dx[i] = (g[i] - y[i] * dot) / raw;
                    }
                } else {
                    for i in range {
                        dx[i] = g[i] / EPS;
                    }
                }
            }
            dx
        }),
        Op::LogSumExpMasked(mask) => unary(&|| {
            let xs = x(0);
            let cols = parents[0].cols();
            xs.iter()
                .enumerate()
                .map(|(i, v)| {
                    let r = i / cols;
                    if mask[i] {
                        g[r] * (v - out.data()[r]).exp()
                    } else {
                        0.0
                    }
                })
                .collect()
        }),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::parameter(Matrix::new(rows, cols, v).unwrap())
    }

    #[test]
    fn linear_family_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = Tensor::constant(Matrix::identity(2));
        assert_eq!(a.matmul(&id).unwrap().values(), &[1.0, 2.0, 3.0, 4.0]);

        let sum = Tensor::vector(vec![1.0, 2.0]).add(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(sum.values(), &[1.0, 2.0]);

        let col = Tensor::new(2, 1, vec![5.0, 7.0]).unwrap();
        assert_eq!(id.matmul(&col).unwrap().values(), &[5.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 3]"), "{msg}");
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn nonlinear_family_examples() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax_rows();
        assert_eq!(s.values(), &[0.5, 0.5]);
        assert_eq!(Tensor::vector(vec![-1.0, 2.0]).relu().values(), &[0.0, 2.0]);
        assert_eq!(Tensor::vector(vec![3.0, -4.0]).l1_norm().item().unwrap(), 7.0);
        assert_eq!(Tensor::vector(vec![3.0, -4.0]).l2_norm().item().unwrap(), 5.0);
    }

    #[test]
    fn log_rejects_negative_and_clamps_zero() {
        assert!(matches!(
            Tensor::vector(vec![1.0, -0.5]).log(),
            Err(Error::Domain { .. })
        ));
        let y = Tensor::vector(vec![0.0]).log().unwrap();
        assert_eq!(y.values()[0], EPS.ln());
    }

    #[test]
    fn cosine_examples() {
        let c = |u: Vec<f64>, v: Vec<f64>| {
            cosine_sim(&Tensor::vector(u), &Tensor::vector(v)).unwrap().item().unwrap()
        };
        assert!((c(vec![1.0, 0.0], vec![1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(c(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
        assert!((c(vec![1.0, 2.0], vec![2.0, 4.0]) - 1.0).abs() < 1e-15);
        // zero vector is guarded rather than NaN
        assert_eq!(c(vec![0.0, 0.0], vec![1.0, 0.0]), 0.0);
    }

    #[test]
    fn backward_of_square() {
        let x = param(1, 1, vec![3.0]);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_of_self_cosine_is_zero() {
        let u = param(1, 3, vec![0.3, -1.2, 2.0]);
        cosine_sim(&u, &u).unwrap().backward().unwrap();
        assert!(u.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = param(1, 2, vec![1.0, 2.0]);
        assert!(matches!(x.relu().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles() {
        let x = param(2, 2, vec![0.5, -1.0, 2.0, 0.1]);
        let loss = x.exp().mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn reused_tensor_accumulates() {
        let x = param(1, 1, vec![2.0]);
        let y = x.add(&x).unwrap().add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let w = param(1, 2, vec![1.0, -2.0]);
        let y = w.scale(3.0);
        let d = y.detach();
        assert_eq!(d.values(), y.values());
        assert!(!d.requires_grad() && !d.has_op_record());
        let dd = d.detach();
        assert_eq!(dd.values(), d.values());
        let loss = d.mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(w.grad_or_zero(), vec![0.0, 0.0]);
    }

    #[test]
    fn constants_carry_no_record() {
        let a = Tensor::vector(vec![1.0]);
        let b = a.exp();
        assert!(!b.has_op_record());
    }

    #[test]
    fn logsumexp_masked_matches_direct() {
        let x = Tensor::from_rows(&[vec![0.1, 2.0, -1.0], vec![0.5, 0.5, 3.0]]).unwrap();
        let mask = [true, false, true, false, true, true];
        let y = x.logsumexp_masked(&mask).unwrap();
        let r0 = (0.1f64.exp() + (-1.0f64).exp()).ln();
        let r1 = (0.5f64.exp() + 3.0f64.exp()).ln();
        assert!((y.values()[0] - r0).abs() < 1e-14);
        assert!((y.values()[1] - r1).abs() < 1e-14);
        assert!(x.logsumexp_masked(&[false; 6]).is_err());
    }
}

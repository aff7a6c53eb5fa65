//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a node's parents always have smaller
//! indices and walking the tape backwards is a reverse topological order:
//! each node is visited exactly once and gradients from shared
//! subexpressions accumulate additively.
//!
//! ```
//! use hyperlat::autodiff::Tape;
//! use hyperlat::DenseMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(DenseMatrix::row_vector(&[3.0]));
//! let x2 = tape.mul(x, x).unwrap();
//! let y = tape.add(x2, x).unwrap(); // x² + x
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
//! ```
//!
//! Binary operations broadcast their *second* operand when it is `1×1`,
//! `1×cols` or `rows×1`. A tape is meant to live for one forward/backward
//! pass and then be dropped.

use crate::error::{Error, Result};
use crate::matrix::{matmul_into, DenseMatrix};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

impl Broadcast {
    fn resolve(a: (usize, usize), b: (usize, usize), op: &str) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if b == (1, a.1) {
            Ok(Broadcast::Row)
        } else if b == (a.0, 1) {
            Ok(Broadcast::Col)
        } else {
            Err(Error::dim(format!(
                "{op}: cannot broadcast {}x{} onto {}x{}",
                b.0, b.1, a.0, a.1
            )))
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => i * cols + j,
            Broadcast::Scalar => 0,
            Broadcast::Row => j,
            Broadcast::Col => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    SqrtShift(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    LeakySoftplus(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MeanCols(Var),
    StdCols(Var),
    SuffixSum(Var),
    SliceCols(Var, usize),
    RollRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Records a computation graph over [`DenseMatrix`] values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseMatrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input (parameter, data batch or constant).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn grad_or_zeros(&self, v: Var) -> DenseMatrix {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                DenseMatrix::zeros(r, c)
            }
        }
    }

    fn push(&mut self, value: DenseMatrix, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::domain(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &str) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let bc = Broadcast::resolve(av.shape(), bv.shape(), name)?;
        let (rows, cols) = av.shape();
        let mut out = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = av.get(i, j);
                let y = bv.data()[bc.index(i, j, cols)];
                let v = match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            return Err(Error::domain("div: division by zero"));
                        }
                        x / y
                    }
                };
                out.set(i, j, v);
            }
        }
        self.push(out, Op::Binary(kind, a, b, bc), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// `sqrt(a + shift)`, elementwise.
    pub fn sqrt_shift(&mut self, a: Var, shift: f64) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| x + shift < 0.0) {
            return Err(Error::domain(format!(
                "sqrt of negative value {} (shift {shift})",
                bad + shift
            )));
        }
        let out = av.map(|x| (x + shift).sqrt());
        self.push(out, Op::SqrtShift(a), "sqrt_shift")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain(format!("log of non-positive value {bad}")));
        }
        let out = av.map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// `slope·x + (1 − slope)·softplus(x)`: smooth everywhere, never flat.
    pub fn leaky_softplus(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| slope * x + (1.0 - slope) * softplus(x));
        self.push(out, Op::LeakySoftplus(a, slope), "leaky_softplus")
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), "clamp")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn require_nonempty(&self, a: Var, name: &str) -> Result<()> {
        if self.value(a).is_empty() {
            return Err(Error::pre(format!("{name} of an empty matrix")));
        }
        Ok(())
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.require_nonempty(a, "sum_all")?;
        let out = DenseMatrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum_all")
    }

    /// Per-row sums, `m×n → m×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.require_nonempty(a, "sum_rows")?;
        let av = self.value(a);
        let sums: Vec<f64> = av.row_iter().map(|r| r.iter().sum()).collect();
        let out = DenseMatrix::new(av.rows(), 1, sums)?;
        self.push(out, Op::SumRows(a), "sum_rows")
    }

    /// Per-column sums, `m×n → 1×n`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.require_nonempty(a, "sum_cols")?;
        let out = column_sums(self.value(a));
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    /// Per-column means over the batch axis, `m×n → 1×n`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        self.require_nonempty(a, "mean_cols")?;
        let av = self.value(a);
        let m = av.rows() as f64;
        let out = column_sums(av).map(|s| s / m);
        self.push(out, Op::MeanCols(a), "mean_cols")
    }

    /// Per-column population standard deviation (divides by `rows`).
    pub fn std_cols(&mut self, a: Var) -> Result<Var> {
        self.require_nonempty(a, "std_cols")?;
        let av = self.value(a);
        if av.rows() < 2 {
            return Err(Error::pre("std_cols needs at least two rows"));
        }
        let out = column_std(av);
        self.push(out, Op::StdCols(a), "std_cols")
    }

    /// Row-wise suffix sums: `out[l][k] = Σ_{j≥k} a[l][j]`.
    ///
    /// Equivalent to multiplying each row by an upper-triangular mask of ones.
    pub fn suffix_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = DenseMatrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            let src = av.row(i);
            let dst = out.row_mut(i);
            let mut acc = 0.0;
            for k in (0..src.len()).rev() {
                acc += src[k];
                dst[k] = acc;
            }
        }
        self.push(out, Op::SuffixSum(a), "suffix_sum")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(Error::dim(format!(
                "slice {start}..{end} of a matrix with {} columns",
                av.cols()
            )));
        }
        let out = av.slice_cols(start, end);
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Left-rolls row `i` by `shifts[i]`: `out[i][c] = a[i][(c + shifts[i]) mod n]`.
    pub fn roll_rows(&mut self, a: Var, shifts: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shifts.len() != av.rows() {
            return Err(Error::dim(format!(
                "roll_rows: {} shifts for {} rows",
                shifts.len(),
                av.rows()
            )));
        }
        let out = roll_left(av, shifts);
        self.push(out, Op::RollRows(a, shifts.to_vec()), "roll_rows")
    }

    /// Back-propagates from a `1×1` output. Gradients from a previous call
    /// are discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).shape() != (1, 1) {
            let (r, c) = self.value(output).shape();
            return Err(Error::pre(format!(
                "backward needs a scalar output, got {r}x{c}"
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &DenseMatrix) {
        // Split borrows: node values are read-only during the sweep while
        // parent gradient slots are written.
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let out = &node.value;
        let grads = &mut self.grads;

        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b, bc) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let cols = av.cols();
                let mut ga = DenseMatrix::zeros(av.rows(), cols);
                let mut gb = DenseMatrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..cols {
                        let gij = g.get(i, j);
                        let bi = bc.index(i, j, cols);
                        let x = av.get(i, j);
                        let y = bv.data()[bi];
                        let (da, db) = match kind {
                            BinaryKind::Add => (1.0, 1.0),
                            BinaryKind::Sub => (1.0, -1.0),
                            BinaryKind::Mul => (y, x),
                            BinaryKind::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga.data_mut()[i * cols + j] += gij * da;
                        gb.data_mut()[bi] += gij * db;
                    }
                }
                add_into(slot(grads, nodes, a), &ga);
                add_into(slot(grads, nodes, b), &gb);
            }
            &Op::Scale(a, c) => {
                for (s, &gi) in slot(grads, nodes, a).data_mut().iter_mut().zip(g.data()) {
                    *s += c * gi;
                }
            }
            &Op::AddScalar(a) => add_into(slot(grads, nodes, a), g),
            &Op::Square(a) => {
                let av = &nodes[a.0].value;
                zip_accumulate(slot(grads, nodes, a), g, av, |gi, x| 2.0 * x * gi);
            }
            &Op::SqrtShift(a) => zip_accumulate(slot(grads, nodes, a), g, out, |gi, y| gi / (2.0 * y)),
            &Op::Log(a) => {
                let av = &nodes[a.0].value;
                zip_accumulate(slot(grads, nodes, a), g, av, |gi, x| gi / x);
            }
            &Op::Exp(a) => zip_accumulate(slot(grads, nodes, a), g, out, |gi, y| gi * y),
            &Op::Sigmoid(a) => zip_accumulate(slot(grads, nodes, a), g, out, |gi, y| gi * y * (1.0 - y)),
            &Op::LeakySoftplus(a, slope) => {
                let av = &nodes[a.0].value;
                zip_accumulate(slot(grads, nodes, a), g, av, |gi, x| {
                    gi * (slope + (1.0 - slope) * sigmoid(x))
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let av = &nodes[a.0].value;
                zip_accumulate(slot(grads, nodes, a), g, av, |gi, x| {
                    if (lo..=hi).contains(&x) {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                matmul_into(g, &bv.transpose(), slot(grads, nodes, a));
                matmul_into(&av.transpose(), g, slot(grads, nodes, b));
            }
            &Op::SumAll(a) => {
                let gi = g.data()[0];
                for s in slot(grads, nodes, a).data_mut() {
                    *s += gi;
                }
            }
            &Op::SumRows(a) => {
                let sa = slot(grads, nodes, a);
                for i in 0..sa.rows() {
                    let gi = g.data()[i];
                    for s in sa.row_mut(i) {
                        *s += gi;
                    }
                }
            }
            &Op::SumCols(a) => {
                let sa = slot(grads, nodes, a);
                for i in 0..sa.rows() {
                    for (s, &gj) in sa.row_mut(i).iter_mut().zip(g.data()) {
                        *s += gj;
                    }
                }
            }
            &Op::MeanCols(a) => {
                let sa = slot(grads, nodes, a);
                let m = sa.rows() as f64;
                for i in 0..sa.rows() {
                    for (s, &gj) in sa.row_mut(i).iter_mut().zip(g.data()) {
                        *s += gj / m;
                    }
                }
            }
            &Op::StdCols(a) => {
                // d s_j / d x_ij = (x_ij − mean_j) / (m · s_j); zero where s_j = 0.
                let av = &nodes[a.0].value;
                let m = av.rows() as f64;
                let means = column_sums(av).map(|s| s / m);
                let sa = slot(grads, nodes, a);
                for i in 0..av.rows() {
                    for j in 0..av.cols() {
                        let s = out.data()[j];
                        if s > 0.0 {
                            let d = (av.get(i, j) - means.data()[j]) / (m * s);
                            sa.data_mut()[i * av.cols() + j] += g.data()[j] * d;
                        }
                    }
                }
            }
            &Op::SuffixSum(a) => {
                // Adjoint of a suffix sum is a prefix sum.
                let sa = slot(grads, nodes, a);
                for i in 0..g.rows() {
                    let mut acc = 0.0;
                    let gr = g.row(i);
                    let dst = sa.row_mut(i);
                    for j in 0..gr.len() {
                        acc += gr[j];
                        dst[j] += acc;
                    }
                }
            }
            &Op::SliceCols(a, start) => {
                let sa = slot(grads, nodes, a);
                for i in 0..g.rows() {
                    let dst = &mut sa.row_mut(i)[start..start + g.cols()];
                    for (d, &gi) in dst.iter_mut().zip(g.row(i)) {
                        *d += gi;
                    }
                }
            }
            Op::RollRows(a, shifts) => {
                let sa = slot(grads, nodes, *a);
                let n = g.cols();
                for (i, &s) in shifts.iter().enumerate() {
                    for c in 0..n {
                        let src = (c + s) % n;
                        sa.data_mut()[i * n + src] += g.get(i, c);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut DenseMatrix, src: &DenseMatrix) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn slot<'g>(grads: &'g mut [Option<DenseMatrix>], nodes: &[Node], v: Var) -> &'g mut DenseMatrix {
    let (r, c) = nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| DenseMatrix::zeros(r, c))
}

fn zip_accumulate(
    dst: &mut DenseMatrix,
    g: &DenseMatrix,
    other: &DenseMatrix,
    f: impl Fn(f64, f64) -> f64,
) {
    for ((d, &gi), &o) in dst.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *d += f(gi, o);
    }
}

pub(crate) fn column_sums(a: &DenseMatrix) -> DenseMatrix {
    let mut out = vec![0.0; a.cols()];
    for r in a.row_iter() {
        for (o, &x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    DenseMatrix::row_vector(&out)
}

pub(crate) fn column_std(a: &DenseMatrix) -> DenseMatrix {
    let m = a.rows() as f64;
    let means = column_sums(a).map(|s| s / m);
    let mut acc = vec![0.0; a.cols()];
    for r in a.row_iter() {
        for ((o, &x), &mu) in acc.iter_mut().zip(r).zip(means.data()) {
            *o += (x - mu) * (x - mu);
        }
    }
    DenseMatrix::row_vector(&acc.iter().map(|s| (s / m).sqrt()).collect::<Vec<_>>())
}

pub(crate) fn roll_left(a: &DenseMatrix, shifts: &[usize]) -> DenseMatrix {
    let n = a.cols();
    let mut out = DenseMatrix::zeros(a.rows(), n);
    for (i, &s) in shifts.iter().enumerate() {
        let src = a.row(i);
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = src[(c + s) % n];
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
///
/// Returns `max |autodiff − fd| / max(1, |fd|)` over all entries of `x`.
pub fn gradient_check<F>(f: F, x: &DenseMatrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let y0 = tape.scalar(out);
    if !y0.is_finite() {
        return Err(Error::domain("gradient_check: non-finite function value"));
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(xv);
    if !analytic.is_finite() {
        return Err(Error::domain("gradient_check: non-finite gradient"));
    }

    let eval = |point: DenseMatrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point);
        let o = f(&mut t, v)?;
        let y = t.scalar(o);
        if !y.is_finite() {
            return Err(Error::domain("gradient_check: non-finite function value"));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[idx] += step;
        let mut minus = x.clone();
        minus.data_mut()[idx] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[idx] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in an arena; [`Var`] is a cheap handle
//! into it. Calling [`Tape::backward`] on a scalar walks the arena in reverse
//! and accumulates gradients for every recorded node.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use nalgebra_sparse::CsrMatrix;

use crate::{Error, Result};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulConst(usize, Rc<DMatrix<f64>>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AffineConst(usize, Rc<DMatrix<f64>>),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SelectCols(usize, Vec<usize>),
    GraphShift(usize, Rc<CsrMatrix<f64>>),
    LogSoftmaxGroups(usize, usize),
    GatherGroups(usize, usize, Vec<usize>),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Arena of recorded values and operations.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.index].as_ref()
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> DMatrix<f64> {
        self.get(v).cloned().unwrap_or_else(|| {
            let shape = tape.value(v).shape();
            DMatrix::zeros(shape.0, shape.1)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.index
    }

    fn val(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[self.idx(v)].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        self.val(v)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.val(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a) * self.val(b);
        let op = Op::MatMul(self.idx(a), self.idx(b));
        self.push(value, op)
    }

    /// `a · M` with a constant right factor.
    pub fn matmul_const(&mut self, a: Var, m: Rc<DMatrix<f64>>) -> Var {
        let value = self.val(a) * m.as_ref();
        let op = Op::MatMulConst(self.idx(a), m);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a) + self.val(b);
        let op = Op::Add(self.idx(a), self.idx(b));
        self.push(value, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a) - self.val(b);
        let op = Op::Sub(self.idx(a), self.idx(b));
        self.push(value, op)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).component_mul(self.val(b));
        let op = Op::Mul(self.idx(a), self.idx(b));
        self.push(value, op)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.val(a), self.val(row));
        assert_eq!(r.nrows(), 1, "bias must be a row");
        assert_eq!(r.ncols(), x.ncols(), "bias width mismatch");
        let mut value = x.clone();
        for mut row_view in value.row_iter_mut() {
            row_view += r;
        }
        let op = Op::AddRow(self.idx(a), self.idx(row));
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.val(a) * s;
        let op = Op::Scale(self.idx(a), s);
        self.push(value, op)
    }

    /// `a ∘ scale + offset` with constant same-shape matrices.
    pub fn affine_const(&mut self, a: Var, scale: Rc<DMatrix<f64>>, offset: &DMatrix<f64>) -> Var {
        let value = self.val(a).component_mul(scale.as_ref()) + offset;
        let op = Op::AffineConst(self.idx(a), scale);
        self.push(value, op)
    }

    /// Adds a constant.
    pub fn add_const(&mut self, a: Var, c: &DMatrix<f64>) -> Var {
        let shape = self.val(a).shape();
        self.affine_const(a, Rc::new(DMatrix::from_element(shape.0, shape.1, 1.0)), c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var {
        let value = self.val(a).map(f);
        let op = op(self.idx(a));
        self.push(value, op)
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.val(a).sum());
        let op = Op::Sum(self.idx(a));
        self.push(value, op)
    }

    /// Mean of all entries as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.val(a).mean());
        let op = Op::Mean(self.idx(a));
        self.push(value, op)
    }

    /// Reshape preserving row-major element order.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.val(a);
        assert_eq!(x.len(), rows * cols, "reshape changes element count");
        let xc = x.ncols();
        let value = DMatrix::from_fn(rows, cols, |r, c| {
            let flat = r * cols + c;
            x[(flat / xc, flat % xc)]
        });
        let op = Op::Reshape(self.idx(a));
        self.push(value, op)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let rows = self.val(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.val(p).ncols()).sum();
        let mut value = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let x = self.val(p);
            assert_eq!(x.nrows(), rows, "row mismatch in concat");
            value.columns_mut(at, x.ncols()).copy_from(x);
            at += x.ncols();
        }
        let op = Op::ConcatCols(parts.iter().map(|&p| self.idx(p)).collect());
        self.push(value, op)
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let value = self.val(a).select_columns(cols);
        let op = Op::SelectCols(self.idx(a), cols.to_vec());
        self.push(value, op)
    }

    /// Applies `S` to each consecutive block of `S.nrows()` rows.
    pub fn graph_shift(&mut self, a: Var, s: Rc<CsrMatrix<f64>>) -> Var {
        let value = shift_blocks(&s, self.val(a));
        let op = Op::GraphShift(self.idx(a), s);
        self.push(value, op)
    }

    /// Row-wise log-softmax over consecutive column groups of size `group`.
    pub fn log_softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let x = self.val(a);
        assert!(group > 0 && x.ncols().is_multiple_of(group), "bad group size");
        let mut value = x.clone();
        for r in 0..x.nrows() {
            for g in 0..x.ncols() / group {
                let cols = g * group..(g + 1) * group;
                let max = cols.clone().map(|c| x[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + cols.clone().map(|c| (x[(r, c)] - max).exp()).sum::<f64>().ln();
                for c in cols {
                    value[(r, c)] = x[(r, c)] - lse;
                }
            }
        }
        let op = Op::LogSoftmaxGroups(self.idx(a), group);
        self.push(value, op)
    }

    /// Picks one column per group and row: the result is `rows × groups` with
    /// `out[r, g] = a[r, g·group + choice[r·groups + g]]`.
    pub fn gather_groups(&mut self, a: Var, group: usize, choice: &[usize]) -> Var {
        let x = self.val(a);
        let groups = x.ncols() / group;
        assert_eq!(choice.len(), x.nrows() * groups, "one choice per row and group");
        let value = DMatrix::from_fn(x.nrows(), groups, |r, g| {
            let c = choice[r * groups + g];
            assert!(c < group, "choice out of range");
            x[(r, g * group + c)]
        });
        let op = Op::GatherGroups(self.idx(a), group, choice.to_vec());
        self.push(value, op)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.val(a).map(|x| x.clamp(lo, hi));
        let op = Op::Clamp(self.idx(a), lo, hi);
        self.push(value, op)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), f64::min);
        let op = Op::Minimum(self.idx(a), self.idx(b));
        self.push(value, op)
    }

    /// Gradients of a `1 × 1` node with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        let shape = self.nodes[loss.index].value.shape();
        if shape != (1, 1) {
            return Err(Error::DimensionMismatch {
                what: "loss elements",
                expected: 1,
                got: shape.0 * shape.1,
            });
        }
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
        let node = &self.nodes[i];
        let v = |k: usize| &self.nodes[k].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g * v(*b).transpose());
                accumulate(grads, *b, v(*a).tr_mul(g));
            }
            Op::MatMulConst(a, m) => accumulate(grads, *a, g * m.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.component_mul(v(*b)));
                accumulate(grads, *b, g.component_mul(v(*a)));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, DMatrix::from_row_slice(1, g.ncols(), g.row_sum().as_slice()));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g * *s),
            Op::AffineConst(a, scale) => accumulate(grads, *a, g.component_mul(scale)),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(v(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
            ),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Exp(a) => accumulate(grads, *a, g.component_mul(&node.value)),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(v(*a), |gi, x| gi / x)),
            Op::Sin(a) => accumulate(grads, *a, g.zip_map(v(*a), |gi, x| gi * x.cos())),
            Op::Cos(a) => accumulate(grads, *a, g.zip_map(v(*a), |gi, x| -gi * x.sin())),
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                accumulate(grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let (r, c) = v(*a).shape();
                accumulate(grads, *a, DMatrix::from_element(r, c, g[(0, 0)] / (r * c) as f64));
            }
            Op::Reshape(a) => {
                let (r, c) = v(*a).shape();
                let gc = g.ncols();
                let back = DMatrix::from_fn(r, c, |i, j| {
                    let flat = i * c + j;
                    g[(flat / gc, flat % gc)]
                });
                accumulate(grads, *a, back);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = v(p).ncols();
                    accumulate(grads, p, g.columns(at, w).into_owned());
                    at += w;
                }
            }
            Op::SelectCols(a, cols) => {
                let (r, c) = v(*a).shape();
                let mut back = DMatrix::zeros(r, c);
                for (k, &col) in cols.iter().enumerate() {
                    let mut dst = back.column_mut(col);
                    dst += g.column(k);
                }
                accumulate(grads, *a, back);
            }
            Op::GraphShift(a, s) => {
                let st = s.transpose();
                accumulate(grads, *a, shift_blocks(&st, g));
            }
            Op::LogSoftmaxGroups(a, group) => {
                let y = &node.value;
                let mut back = g.clone();
                for r in 0..y.nrows() {
                    for k in 0..y.ncols() / group {
                        let cols = k * group..(k + 1) * group;
                        let gsum: f64 = cols.clone().map(|c| g[(r, c)]).sum();
                        for c in cols {
                            back[(r, c)] -= y[(r, c)].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *a, back);
            }
            Op::GatherGroups(a, group, choice) => {
                let (r, c) = v(*a).shape();
                let groups = c / group;
                let mut back = DMatrix::zeros(r, c);
                for row in 0..r {
                    for k in 0..groups {
                        back[(row, k * group + choice[row * groups + k])] += g[(row, k)];
                    }
                }
                accumulate(grads, *a, back);
            }
            Op::Clamp(a, lo, hi) => accumulate(
                grads,
                *a,
                g.zip_map(v(*a), |gi, x| if x > *lo && x < *hi { gi } else { 0.0 }),
            ),
            Op::Minimum(a, b) => {
                let (xa, xb) = (v(*a), v(*b));
                let mask_a = xa.zip_map(xb, |p, q| if p <= q { 1.0 } else { 0.0 });
                accumulate(grads, *a, g.component_mul(&mask_a));
                accumulate(grads, *b, g.zip_map(&mask_a, |gi, m| gi * (1.0 - m)));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], k: usize, g: DMatrix<f64>) {
    match &mut grads[k] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

/// `S X_b` for every block `X_b` of `S.nrows()` consecutive rows.
pub fn shift_blocks(s: &CsrMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = s.nrows();
    assert!(d > 0 && x.nrows().is_multiple_of(d), "rows are not a multiple of the operator size");
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for b in 0..x.nrows() / d {
        let base = b * d;
        for (i, row) in s.row_iter().enumerate() {
            for (&j, &w) in row.col_indices().iter().zip(row.values()) {
                for c in 0..x.ncols() {
                    out[(base + i, c)] += w * x[(base + j, c)];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn least_squares_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(m(2, 3, &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7]));
        let x = t.leaf(m(3, 1, &[1.0, 2.0, -1.0]));
        let y = t.leaf(m(2, 1, &[0.2, -0.4]));
        let wx = t.matmul(w, x);
        let r = t.sub(wx, y);
        let sq = t.mul(r, r);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let grads = t.backward(loss).unwrap();
        let resid = t.value(r).clone();
        let expected = &resid * t.value(x).transpose();
        assert_relative_eq!(grads.get(w).unwrap(), &expected, epsilon = 1e-14);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(m(1, 2, &[1.0, 2.0]));
        let zero = t.scale(p, 0.0);
        let loss = t.sum(zero);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.wrt(&t, p), DMatrix::zeros(1, 2));
    }

    #[test]
    fn detached_and_nonscalar_losses() {
        let mut a = Tape::new();
        let b = Tape::new();
        let v = a.leaf(m(1, 1, &[1.0]));
        assert!(matches!(b.backward(v), Err(Error::DetachedGraph)));
        let w = a.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(a.backward(w).is_err());
    }

    #[test]
    fn reshape_is_row_major() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = t.reshape(x, 3, 2);
        assert_eq!(t.value(r), &m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = t.reshape(x, 1, 6);
        assert_eq!(t.value(r), &m(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn log_softmax_groups_normalize() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 4, &[0.0, 1.0, 5.0, 5.0]));
        let y = t.log_softmax_groups(x, 2);
        let p = t.value(y).map(f64::exp);
        assert_relative_eq!(p[(0, 0)] + p[(0, 1)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(p[(0, 2)], 0.5, epsilon = 1e-15);
        let g = t.gather_groups(y, 2, &[1, 0]);
        assert_eq!(t.value(g).shape(), (1, 2));
        assert_relative_eq!(t.value(g)[(0, 1)], 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn graph_shift_acts_per_block() {
        let s = Rc::new(CsrMatrix::from(&m(2, 2, &[0.0, 1.0, 1.0, 0.0])));
        let mut t = Tape::new();
        let x = t.leaf(m(4, 1, &[1.0, 2.0, 3.0, 4.0]));
        let y = t.graph_shift(x, s);
        assert_eq!(t.value(y), &m(4, 1, &[2.0, 1.0, 4.0, 3.0]));
    }
}

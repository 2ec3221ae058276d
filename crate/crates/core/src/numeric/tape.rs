//! Reverse-mode differentiation over an explicit, append-only tape.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf and appends one node. `backward`
//! walks the nodes in reverse insertion order, so gradients are bit-reproducible.

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{masked_softmax, normalize_rows, Mask, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Constant,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleBy(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    Normalize { x: Var, inv_std: Vec<T> },
    MaskedSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    RepeatRows(Var),
    Sum(Var),
    Nll { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let op = if p.trainable {
            Op::Param {
                store: store.id(),
                id,
            }
        } else {
            Op::Constant
        };
        self.push(p.value.clone(), op, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(v, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).mul_row(self.value(row))?;
        self.push(v, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a), "add_const")
    }

    /// Multiplies `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ss = self.value(s);
        if ss.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a),
                rhs: ss.shape(),
            });
        }
        let c = ss.item();
        let v = self.value(a).scale(c);
        self.push(v, Op::ScaleBy(a, s), "scale_by")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), "silu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), "abs")
    }

    /// Per-row standardization without affine terms.
    pub fn normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (v, inv_std) = normalize_rows(self.value(x), eps);
        self.push(v, Op::Normalize { x, inv_std }, "normalize")
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &Mask) -> Result<Var> {
        let v = masked_softmax(self.value(scores), mask)?;
        self.push(v, Op::MaskedSoftmax(scores), "masked_softmax")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        self.push(v, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        self.push(v, Op::SliceCols(a, start), "slice_cols")
    }

    /// Mean over rows, giving a 1xC row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: t.shape(),
                rhs: (1, t.cols()),
            });
        }
        let inv = T::one() / T::from_usize(t.rows()).unwrap_or_else(T::one);
        let v = t.col_sum().scale(inv);
        self.push(v, Op::MeanRows(a), "mean_rows")
    }

    /// Repeats a 1xC row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(Error::Shape {
                op: "repeat_rows",
                lhs: t.shape(),
                rhs: (1, t.cols()),
            });
        }
        let v = Tensor::from_fn(n, t.cols(), |_, j| t.get(0, j));
        self.push(v, Op::RepeatRows(a), "repeat_rows")
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// `-Σ_j log softmax(logits_j)[targets_j]`, each row normalized independently.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != targets.len() {
            return Err(Error::Shape {
                op: "nll",
                lhs: l.shape(),
                rhs: (targets.len(), 1),
            });
        }
        for (position, &token) in targets.iter().enumerate() {
            if token >= l.cols() {
                return Err(Error::VocabularyRange { position, token });
            }
        }
        let probs = masked_softmax(l, &Mask::new(l.rows(), l.cols(), true))?;
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total - log_softmax_at(l.row(i), t);
        }
        self.push(
            Tensor::scalar(total),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "nll",
        )
    }

    /// Reverse sweep from a 1x1 `loss`. Returns gradients for every trainable parameter leaf.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::NonScalarLoss(self.shape(loss)));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param { store, id } => out.entries.push((*store, *id, g)),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_tn(self.value(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-T::one()));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.col_sum());
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let da = g.mul_row(self.value(*row))?;
                    let dr = g.hadamard(self.value(*a))?.col_sum();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *row, dr);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::ScaleBy(a, s) => {
                    let c = self.value(*s).item();
                    let ds = g.hadamard(self.value(*a))?.sum();
                    acc(&mut grads, *a, g.scale(c));
                    acc(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, "tanh'", |g, y| g * (T::one() - y * y))?;
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid'", |g, y| g * y * (T::one() - y))?;
                    acc(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(*a), "silu'", |g, x| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })?;
                    acc(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(self.value(*a), "abs'", |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })?;
                    acc(&mut grads, *a, d);
                }
                Op::Normalize { x, inv_std } => {
                    let y = &node.value;
                    let n = T::from_usize(y.cols()).unwrap_or_else(T::one);
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gy = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gy.iter().fold(T::zero(), |a, &v| a + v) / n;
                        let mean_gy = gy
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv)
                            / n;
                        let r = inv_std[i];
                        for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                            *d = r * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if r > 0 {
                            acc(&mut grads, *p, g.slice_rows(start, r)?);
                        }
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        acc(&mut grads, *p, g.slice_cols(start, c)?);
                        start += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let inv = T::one() / T::from_usize(src.rows()).unwrap_or_else(T::one);
                    let d = Tensor::from_fn(src.rows(), src.cols(), |_, j| g.get(0, j) * inv);
                    acc(&mut grads, *a, d);
                }
                Op::RepeatRows(a) => acc(&mut grads, *a, g.col_sum()),
                Op::Sum(a) => {
                    let src = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(src.rows(), src.cols(), g.item()));
                }
                Op::Nll {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g.item();
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d.set(i, t, d.get(i, t) - T::one());
                    }
                    acc(&mut grads, *logits, d.scale(gs));
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log softmax(row)[t]` with max-shift.
pub(crate) fn log_softmax_at<T: Real>(row: &[T], t: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    row[t] - max - z.ln()
}

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type a kernel can run in: `f64` for verification, `f32` for benchmarks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self;

    fn to_f64c(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`, accumulating over the shared dimension in ascending order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c = *c + a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                let c_row = &mut out[i * m..(i + 1) * m];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c = *c + a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
    }

    /// Adds a 1xC row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (a, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *a = *a + b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a 1xC row.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (a, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *a = *a * b;
            }
        }
        Ok(out)
    }

    /// Column sums as a 1xC row.
    pub fn col_sum(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape(),
                rhs: (start, len),
            });
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(),
                rhs: (start, len),
            });
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Self {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols && p.rows > 0 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            if p.rows != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
        }
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }
}

/// Boolean attention mask; `allowed(i, j)` means query row `i` may read key column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rectangular sub-block `[r0, r0+nr) x [c0, c0+nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Self {
        Self::from_fn(nr, nc, |i, j| self.allowed(r0 + i, c0 + j))
    }

    pub fn count_allowed(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Row-wise softmax restricted to permitted entries; forbidden entries are exactly zero.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    if scores.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: scores.shape(),
            rhs: mask.shape(),
        });
    }
    let mut out = Tensor::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        let s = scores.row(i);
        let m = mask.row(i);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (&v, &ok) in s.iter().zip(m) {
            if ok {
                any = true;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let o = out.row_mut(i);
        let mut total = T::zero();
        for ((dst, &v), &ok) in o.iter_mut().zip(s).zip(m) {
            if ok {
                let e = (v - max).exp();
                *dst = e;
                total = total + e;
            }
        }
        let inv = T::one() / total;
        for (dst, &ok) in o.iter_mut().zip(m) {
            if ok {
                *dst = *dst * inv;
            }
        }
    }
    out.check_finite("masked_softmax")
}

/// Per-row normalization to zero mean and unit variance (population variance, `eps` inside the root).
/// Returns the normalized tensor and the per-row inverse standard deviations.
pub fn normalize_rows<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let n = T::from_usize(x.cols()).unwrap_or_else(T::one);
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let mean = r.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = r.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_exact() {
        let a = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64 * 0.37 - 1.0);
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, (2, 3));
                assert_eq!(rhs, (2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.5);
        let b = Tensor::from_fn(5, 3, |i, j| (i * j) as f64 * 0.25 - 0.3);
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt, a.matmul(&b.transpose()).unwrap());
        let c = Tensor::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(a.matmul_tn(&c).unwrap(), a.transpose().matmul(&c).unwrap());
    }

    #[test]
    fn softmax_single_permitted_entry() {
        let s = Tensor::from_rows(&[vec![3.0, -2.0, 5.0]]).unwrap();
        let mut m = Mask::new(1, 3, false);
        m.set(0, 1, true);
        let p = masked_softmax(&s, &m).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_symmetric_row() {
        let s = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let p = masked_softmax(&s, &Mask::new(1, 2, true)).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_match_shifted_oracle() {
        let s = Tensor::from_rows(&[vec![1000.0, 999.0, 998.0]]).unwrap();
        let p = masked_softmax(&s, &Mask::new(1, 3, true)).unwrap();
        // exp(0), exp(-1), exp(-2) normalized
        let e = [1.0f64, (-1.0f64).exp(), (-2.0f64).exp()];
        let z: f64 = e.iter().sum();
        for (got, want) in p.data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let mut m = Mask::new(2, 2, true);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert!(matches!(
            masked_softmax(&s, &m),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn normalize_constant_row_is_zero() {
        let x = Tensor::filled(1, 5, 3.25);
        let (y, _) = normalize_rows(&x, 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let b = Tensor::from_fn(1, 3, |_, j| j as f64 + 10.0);
        let c = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.slice_rows(2, 1).unwrap(), b);
        let d = Tensor::concat_cols(&[&a, &a]).unwrap();
        assert_eq!(d.slice_cols(3, 3).unwrap(), a);
    }
}

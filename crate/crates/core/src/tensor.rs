//! Dense row-major 2-D tensors and the plain (non-recording) kernels used by
//! both the autodiff tape and the quantized paths.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let t = Self::new_unchecked(rows, cols, data)?;
        if let Some(bad) = t.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {bad}")));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but allows NaN/Inf, for diagnostics.
    pub fn new_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (1, cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Convenience for tests and examples: builds from `f64` rows.
    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_f64_rows",
                lhs: (rows.len(), cols),
                rhs: (0, 0),
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::of(x))).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(1, 1, value)
    }

    /// Elementwise `Normal(0, std)` draws. Sampling happens in `f64` so that
    /// `f32` and `f64` tensors built from the same generator agree up to rounding.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access. Only parameters owned by a model or optimizer
    /// should be mutated this way.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Converts element type, dropping any gradient buffer.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![T::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
            requires_grad: false,
            grad: None,
        }
    }

    /// Plain matrix product, no recording.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = vec![T::zero(); self.rows * other.cols];
        matmul_into(&self.data, &other.data, &mut out, self.rows, self.cols, other.cols);
        Self::new_unchecked(self.rows, other.cols, out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * k).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new_unchecked(self.rows, self.cols, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Order-sensitive FNV-1a checksum over the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            for b in x.as_f64().to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// `out += a(m×k) · b(k×n)`, accumulating each output over `k` in ascending order.
///
/// The quantized matmul reproduces exactly this order, which is what makes the
/// two paths bitwise identical.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a(m×k) · b(n×k)ᵀ`.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a(k×m)ᵀ · b(k×n)`.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

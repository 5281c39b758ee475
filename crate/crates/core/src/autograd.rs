//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so node indices are
//! already a topological order and the backward pass is a single reverse scan.
//! Parameters are borrowed rather than copied; gradients come back in a
//! [`Gradients`] value that can be written into the parameters once the tape
//! (and with it the borrow) is gone.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::quant::{quantized_matmul, quantized_matmul_nt_into, QuantizedMatrix};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op<'p, T> {
    Leaf,
    MatMul(Var, Var),
    QuantMatMul(Var, &'p QuantizedMatrix),
    Binary(BinaryKind, Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Diagonal(Var),
    Sum(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<'p, T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn addr<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that treats every parameter as a constant (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<'p, T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<'p, T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// Registers a borrowed parameter. Gradients are tracked iff the tensor
    /// has `requires_grad` set. Registering the same tensor twice returns the
    /// same handle.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&addr(t)) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf, t.requires_grad);
        self.params.insert(addr(t), v);
        v
    }

    /// Owned leaf; gradients tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · dequantize(q)`; `q` is frozen, so only `x` receives a gradient.
    pub fn quantized_matmul(&mut self, x: Var, q: &'p QuantizedMatrix) -> Result<Var> {
        let out = quantized_matmul(self.value(x), q)?;
        Ok(self.push_owned(out, Op::QuantMatMul(x, q), &[x]))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            BinaryKind::Add => va.add(vb),
            BinaryKind::Sub => va.sub(vb),
            BinaryKind::Mul => {
                if va.shape() != vb.shape() {
                    return Err(self.mismatch("mul", a, b));
                }
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                Tensor::new_unchecked(va.rows(), va.cols(), data)
            }
        }?;
        Ok(self.push_owned(out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Adds a `1×n` row vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let n = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        let out = Tensor::new_unchecked(vx.rows(), n, data)?;
        Ok(self.push_owned(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        self.push_owned(out, Op::Scale(x, k), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push_owned(out, Op::Transpose(x), &[x])
    }

    /// Tanh-approximate GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new_unchecked(vx.rows(), vx.cols(), data).unwrap();
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = vx.shape();
        if vg.shape() != (1, n) || vb.shape() != (1, n) {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let nt = T::of(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(is);
            for ((&x, &g), &b) in row.iter().zip(vg.data()).zip(vb.data()) {
                let h = (x - mean) * is;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let out = Tensor::new_unchecked(m, n, out)?;
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Numerically stable row softmax (max subtraction per row).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            softmax_row(vx.row(r), None, &mut out[r * n..(r + 1) * n]);
        }
        let out = Tensor::new_unchecked(m, n, out).unwrap();
        self.push_owned(out, Op::Softmax(x), &[x])
    }

    /// Row softmax restricted to entries where `keep` is true; excluded
    /// entries get probability exactly 0 and a row with nothing kept is all 0.
    pub fn softmax_rows_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        if keep.len() != m * n {
            return Err(Error::Shape {
                op: "softmax_rows_masked",
                lhs: (m, n),
                rhs: (keep.len(), 1),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            softmax_row(vx.row(r), Some(&keep[r * n..(r + 1) * n]), &mut out[r * n..(r + 1) * n]);
        }
        let out = Tensor::new_unchecked(m, n, out)?;
        Ok(self.push_owned(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = vx.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new_unchecked(m, n, out).unwrap();
        self.push_owned(out, Op::LogSoftmax(x), &[x])
    }

    /// Mean of the rows of `h` selected by `mask`, as a `1×d` tensor.
    pub fn masked_mean_rows(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let vh = self.value(h);
        let (t, d) = vh.shape();
        if mask.len() != t {
            return Err(Error::Shape {
                op: "masked_mean_rows",
                lhs: (t, d),
                rhs: (mask.len(), 1),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateMask);
        }
        let mut out = vec![T::zero(); d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(vh.row(r)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new_unchecked(1, d, out)?;
        Ok(self.push_owned(
            out,
            Op::MaskedMean {
                x: h,
                mask: mask.to_vec(),
                count,
            },
            &[h],
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, d) = vt.shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: (rows, d),
                rhs: (bad, 0),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        let out = Tensor::new_unchecked(ids.len(), d, out)?;
        Ok(self.push_owned(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sub-block `x[row0..row0+rows, col0..col0+cols]`.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        if row0 + rows > vx.rows() || col0 + cols > vx.cols() {
            return Err(Error::Shape {
                op: "slice",
                lhs: vx.shape(),
                rhs: (row0 + rows, col0 + cols),
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            out.extend_from_slice(&vx.row(r)[col0..col0 + cols]);
        }
        let out = Tensor::new_unchecked(rows, cols, out)?;
        Ok(self.push_owned(out, Op::Slice { x, row0, col0 }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new_unchecked(rows, total, out)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::new_unchecked(rows, cols, out)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Scales every row to unit L2 norm; zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = vx.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::ZeroNorm);
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new_unchecked(m, n, out)?;
        Ok(self.push_owned(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        if m != n {
            return Err(self.mismatch("diagonal", x, x));
        }
        let out = (0..n).map(|i| vx.get(i, i)).collect();
        let out = Tensor::new_unchecked(n, 1, out)?;
        Ok(self.push_owned(out, Op::Diagonal(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Reverse pass from a `1×1` loss. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(&a, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]);
                (a, g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let (m, n) = out.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = va.cols();
                acc(*a, &mut |da| matmul_nt_into(g, vb.data(), da, m, n, k));
                acc(*b, &mut |db| matmul_tn_into(va.data(), g, db, m, k, n));
            }
            Op::QuantMatMul(x, q) => {
                acc(*x, &mut |dx| quantized_matmul_nt_into(g, q, dx, m));
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match kind {
                    BinaryKind::Add => {
                        acc(*a, &mut |d| add_into(d, g));
                        acc(*b, &mut |d| add_into(d, g));
                    }
                    BinaryKind::Sub => {
                        acc(*a, &mut |d| add_into(d, g));
                        acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
                    }
                    BinaryKind::Mul => {
                        acc(*a, &mut |d| {
                            for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb.data()) {
                                *d += g * y;
                            }
                        });
                        acc(*b, &mut |d| {
                            for ((d, &g), &x) in d.iter_mut().zip(g).zip(va.data()) {
                                *d += g * x;
                            }
                        });
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *k)),
            Op::Transpose(x) => acc(*x, &mut |d| {
                // out is m×n, x is n×m
                for r in 0..m {
                    for c in 0..n {
                        d[c * m + r] += g[r * n + c];
                    }
                }
            }),
            Op::Gelu(x) => {
                let vx = self.value(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx.data()) {
                        *d += g * gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gain);
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
                acc(*gain, &mut |d| {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &g), &h) in d.iter_mut().zip(row).zip(hrow) {
                            *d += g * h;
                        }
                    }
                });
                acc(*x, &mut |d| {
                    let nt = T::of(n as f64);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<T> = gr.iter().zip(vg.data()).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
                        let k = inv_std[r] / nt;
                        for c in 0..n {
                            d[r * n + c] += k * (nt * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(x) => acc(*x, &mut |d| {
                for r in 0..m {
                    let y = out.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..n {
                        d[r * n + c] += y[c] * (gr[c] - dot);
                    }
                }
            }),
            Op::LogSoftmax(x) => acc(*x, &mut |d| {
                for r in 0..m {
                    let y = out.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let gs = gr.iter().copied().sum::<T>();
                    for c in 0..n {
                        d[r * n + c] += gr[c] - y[c].exp() * gs;
                    }
                }
            }),
            Op::MaskedMean { x, mask, count } => {
                let inv = T::one() / T::of(*count as f64);
                acc(*x, &mut |d| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                        for (dd, &gv) in d[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *dd += gv * inv;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => acc(*table, &mut |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }),
            Op::Slice { x, row0, col0 } => {
                let xc = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let start = (row0 + r) * xc + col0;
                        add_into(&mut d[start..start + n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    acc(p, &mut |d| {
                        for r in 0..m {
                            add_into(&mut d[r * pc..(r + 1) * pc], &g[r * n + offset..r * n + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::NormalizeRows { x, norms } => acc(*x, &mut |d| {
                for r in 0..m {
                    let y = out.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..n {
                        d[r * n + c] += (gr[c] - y[c] * dot) / norms[r];
                    }
                }
            }),
            Op::Diagonal(x) => {
                let k = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i * k + i] += gv;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_row<T: Scalar>(row: &[T], keep: Option<&[bool]>, out: &mut [T]) {
    let kept = |c: usize| keep.is_none_or(|k| k[c]);
    let max = (0..row.len())
        .filter(|&c| kept(c))
        .fold(T::neg_infinity(), |a, c| a.max(row[c]));
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut total = T::zero();
    for c in 0..row.len() {
        out[c] = if kept(c) { (row[c] - max).exp() } else { T::zero() };
        total += out[c];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * 0.044715) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value, if it was on the path.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter registered with [`Tape::param`]; zeros when it
    /// was registered but did not influence the loss.
    pub fn of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&addr(t)).map(Vec::as_slice)
    }

    /// Writes the gradient into `t.grad` (zeros if `t` did not participate).
    /// Frozen tensors are left without a gradient buffer.
    pub fn store_into(&self, t: &mut Tensor<T>) {
        if !t.requires_grad {
            t.grad = None;
            return;
        }
        let g = self.of(t).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec);
        t.grad = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(m(&[&[1.0], &[1.0]]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
        let id = tape.constant(Tensor::identity(2));
        let y = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let z = tape.constant(Tensor::zeros(2, 3));
        let y = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(2, 3));
        let err = tape.matmul(ones, ones).unwrap_err();
        assert!(err.to_string().contains("(2, 1)"));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(m(&[&[2.0, 3.0]]));
        let b = tape.constant(m(&[&[1.0, 1.0]]));
        let s = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);
        let z = tape.constant(Tensor::zeros(1, 2));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let one = tape.constant(Tensor::filled(1, 2, 1.0));
        let s = tape.mul(a, one).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let wide = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.add(a, wide).is_err());
        assert!(tape.mul(a, wide).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[0.0, 0.0], &[0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-12 && (v[3] - 0.75).abs() < 1e-12);
        let x = tape.constant(m(&[&[700.0, 700.0, 700.0]]));
        let y = tape.softmax_rows(x);
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_excludes_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(m(&[&[1.0, 5.0, 1.0], &[2.0, 2.0, 2.0]]));
        let y = tape
            .softmax_rows_masked(x, &[true, false, true, false, false, false])
            .unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_mean_examples() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.masked_mean_rows(h, &[true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        let h3 = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let y = tape.masked_mean_rows(h3, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        let h1 = tape.constant(m(&[&[7.0, 7.0]]));
        let y = tape.masked_mean_rows(h1, &[true]).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 7.0]);
        assert!(matches!(tape.masked_mean_rows(h, &[false, false]), Err(Error::DegenerateMask)));
    }

    #[test]
    fn backward_examples() {
        let x = m(&[&[1.0, 2.0]]).trainable();
        let other = m(&[&[5.0]]).trainable();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let ov = tape.param(&other);
        let s = tape.sum(xv);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.of(&other).unwrap(), &[0.0]);
        assert!(grads.wrt(ov).is_none());

        let sq = tape.mul(xv, xv).unwrap();
        let l = tape.sum(sq);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[2.0, 4.0]);
        assert!(matches!(tape.backward(sq), Err(Error::NotScalar((1, 2)))));
    }

    #[test]
    fn store_into_handles_frozen_and_idle_params() {
        let mut a = m(&[&[1.0]]).trainable();
        let mut frozen = m(&[&[2.0]]);
        let mut idle = m(&[&[3.0, 4.0]]).trainable();
        let grads = {
            let mut tape = Tape::new();
            let av = tape.param(&a);
            let fv = tape.param(&frozen);
            tape.param(&idle);
            let p = tape.mul(av, fv).unwrap();
            tape.backward(p).unwrap()
        };
        grads.store_into(&mut a);
        grads.store_into(&mut frozen);
        grads.store_into(&mut idle);
        assert_eq!(a.grad.as_deref(), Some(&[2.0][..]));
        assert!(frozen.grad.is_none());
        assert_eq!(idle.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn no_grad_tape_records_nothing_trainable() {
        let x = m(&[&[1.0, 2.0]]).trainable();
        let mut tape = Tape::no_grad();
        let v = tape.param(&x);
        assert!(!tape.requires_grad(v));
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::randn(r, c, 1.0, rng).trainable()
    }

    #[test]
    fn gradcheck_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let check = GradCheck::default();
        let ins = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 1, 5)];
        let w = random(&mut rng, 3, 5);
        let report = check_gradients(&ins, &check, |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            let y = tape.add_row_bias(y, v[2])?;
            let y = tape.gelu(y);
            let wv = tape.constant(w.clone());
            let y = tape.mul(y, wv)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let ins = vec![random(&mut rng, 4, 6), random(&mut rng, 1, 6), random(&mut rng, 1, 6)];
        let report = check_gradients(&ins, &check, |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2])?;
            let t = tape.transpose(y);
            let s = tape.matmul(y, t)?;
            let keep: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
            let p = tape.softmax_rows_masked(s, &keep)?;
            let l = tape.log_softmax_rows(p);
            let d = tape.diagonal(l)?;
            let sub = tape.slice(y, 1, 2, 2, 3)?;
            let c = tape.concat_cols(&[sub, sub])?;
            let r = tape.concat_rows(&[c, c])?;
            let mm = tape.masked_mean_rows(r, &[true, false, true, true])?;
            let q = tape.mul(mm, mm)?;
            let a = tape.sum(d);
            let b = tape.sum(q);
            let b = tape.scale(b, 0.3);
            let out = tape.sub(a, b)?;
            Ok(out)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");

        let ins = vec![random(&mut rng, 5, 3), random(&mut rng, 3, 4)];
        let report = check_gradients(&ins, &check, |tape, v| {
            let g = tape.gather_rows(v[0], &[4, 0, 4, 2])?;
            let n = tape.normalize_rows(g)?;
            let y = tape.matmul(n, v[1])?;
            let y = tape.softmax_rows(y);
            let y = tape.mul(y, y)?;
            Ok(tape.mean(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn quantized_matmul_input_gradient() {
        use crate::quant::{quantize_blockwise, QuantConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(4, 3, 1.0, &mut rng);
        let q = quantize_blockwise(&w, QuantConfig::symmetric(5).unwrap()).unwrap();
        let ins = vec![random(&mut rng, 2, 4)];
        let report = check_gradients(&ins, &GradCheck::default(), |tape, v| {
            let y = tape.quantized_matmul(v[0], &q)?;
            let y = tape.gelu(y);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::randn(6, 6, 1.0, &mut rng).trainable();
        let run = || {
            let mut tape = Tape::new();
            let v = tape.param(&a);
            let y = tape.matmul(v, v).unwrap();
            let y = tape.softmax_rows(y);
            let s = tape.sum(y);
            tape.backward(s).unwrap().of(&a).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}

//! Blockwise 8-bit absmax quantization.
//!
//! A matrix is flattened row-major and cut into blocks of `block_size`
//! elements; each block stores one `f32` scale (its absolute maximum) and one
//! 8-bit code per element. The last block may be shorter. Values are only
//! stored quantized: every consumer dequantizes on the fly and computes in
//! floating point.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LQ8\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

/// Grid used to map a block onto 8 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codebook {
    /// Codes in `[-127, 127]`, value = code / 127 * absmax.
    LinearSymmetric,
    /// Codes in `[0, 255]` for non-negative data, value = code / 255 * max.
    LinearUnsigned,
}

impl Codebook {
    fn levels(self) -> f64 {
        match self {
            Codebook::LinearSymmetric => 127.0,
            Codebook::LinearUnsigned => 255.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Codebook::LinearSymmetric => 0,
            Codebook::LinearUnsigned => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Codebook::LinearSymmetric),
            1 => Ok(Codebook::LinearUnsigned),
            t => Err(Error::Checkpoint(format!("unknown codebook tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub block_size: usize,
    pub codebook: Codebook,
}

impl QuantConfig {
    pub fn new(block_size: usize, codebook: Codebook) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::Config("quantization block size must be >= 1".into()));
        }
        Ok(Self { block_size, codebook })
    }

    pub fn symmetric(block_size: usize) -> Result<Self> {
        Self::new(block_size, Codebook::LinearSymmetric)
    }

    pub fn unsigned(block_size: usize) -> Result<Self> {
        Self::new(block_size, Codebook::LinearUnsigned)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    block_size: usize,
    codebook: Codebook,
    /// One code per element; for the unsigned codebook the byte is read as `u8`.
    codes: Vec<i8>,
    absmax: Vec<f32>,
}

fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codebook(&self) -> Codebook {
        self.codebook
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn absmax(&self) -> &[f32] {
        &self.absmax
    }

    /// Raw stored bytes as signed integers.
    pub fn raw_codes(&self) -> &[i8] {
        &self.codes
    }

    /// Code of element `i` interpreted according to the codebook.
    pub fn code(&self, i: usize) -> i32 {
        match self.codebook {
            Codebook::LinearSymmetric => i32::from(self.codes[i]),
            Codebook::LinearUnsigned => i32::from(self.codes[i] as u8),
        }
    }

    pub fn codes(&self) -> Vec<i32> {
        (0..self.codes.len()).map(|i| self.code(i)).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.absmax.len()
    }

    /// Builds a matrix from raw parts, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        cfg: QuantConfig,
        codes: Vec<i8>,
        absmax: Vec<f32>,
    ) -> Result<Self> {
        let n = rows * cols;
        if cfg.block_size == 0 {
            return Err(Error::Checkpoint("block size 0".into()));
        }
        if codes.len() != n || absmax.len() != n.div_ceil(cfg.block_size) {
            return Err(Error::Checkpoint(format!(
                "quantized {rows}x{cols} with block {} has {} codes and {} scales",
                cfg.block_size,
                codes.len(),
                absmax.len()
            )));
        }
        if absmax.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Checkpoint("block scale negative or non-finite".into()));
        }
        if cfg.codebook == Codebook::LinearSymmetric && codes.contains(&i8::MIN) {
            return Err(Error::Checkpoint("signed code -128 outside [-127, 127]".into()));
        }
        for (b, &s) in absmax.iter().enumerate() {
            let lo = b * cfg.block_size;
            let hi = (lo + cfg.block_size).min(n);
            if s == 0.0 && codes[lo..hi].iter().any(|&c| c != 0) {
                return Err(Error::Checkpoint(format!("block {b} has zero scale but non-zero codes")));
            }
        }
        Ok(Self {
            rows,
            cols,
            block_size: cfg.block_size,
            codebook: cfg.codebook,
            codes,
            absmax,
        })
    }

    #[inline]
    fn value_at(&self, i: usize) -> f64 {
        let scale = f64::from(self.absmax[i / self.block_size]);
        f64::from(self.code(i)) / self.codebook.levels() * scale
    }

    /// Dequantizes row `r` into `out` (length `cols`).
    pub fn dequantize_row_into<T: Scalar>(&self, r: usize, out: &mut [T]) {
        let start = r * self.cols;
        for (j, o) in out.iter_mut().enumerate() {
            *o = T::of(self.value_at(start + j));
        }
    }

    /// Exact size in bytes of [`QuantizedMatrix::write_to`]'s output.
    pub fn serialized_size(&self) -> usize {
        serialized_size_for(self.rows * self.cols, self.block_size)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.serialized_size());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.rows, self.cols, self.block_size] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(self.codebook.tag());
        buf.extend_from_slice(&[0u8; 11]);
        buf.extend(self.codes.iter().map(|&c| c as u8));
        for s in &self.absmax {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; HEADER_BYTES];
        r.read_exact(&mut header)
            .map_err(|e| Error::Checkpoint(format!("truncated q8 header: {e}")))?;
        if header[..4] != MAGIC {
            return Err(Error::Checkpoint("bad q8 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported q8 version {version}")));
        }
        let (rows, cols, block_size) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let codebook = Codebook::from_tag(header[20])?;
        if block_size == 0 {
            return Err(Error::Checkpoint("q8 block size 0".into()));
        }
        let n = rows * cols;
        let mut codes = vec![0u8; n];
        r.read_exact(&mut codes)
            .map_err(|e| Error::Checkpoint(format!("truncated q8 codes: {e}")))?;
        let mut scales = vec![0u8; 4 * n.div_ceil(block_size)];
        r.read_exact(&mut scales)
            .map_err(|e| Error::Checkpoint(format!("truncated q8 scales: {e}")))?;
        let absmax = scales
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(
            rows,
            cols,
            QuantConfig { block_size, codebook },
            codes.into_iter().map(|c| c as i8).collect(),
            absmax,
        )
    }
}

/// Byte count of the on-disk encoding for `elements` values at block size `block_size`.
pub fn serialized_size_for(elements: usize, block_size: usize) -> usize {
    HEADER_BYTES + elements + 4 * elements.div_ceil(block_size)
}

/// Quantizes `w` blockwise over its row-major flattening.
pub fn quantize_blockwise<T: Scalar>(w: &Tensor<T>, cfg: QuantConfig) -> Result<QuantizedMatrix> {
    if !w.is_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    quantize_slice(w.data(), w.rows(), w.cols(), cfg)
}

pub(crate) fn quantize_slice<T: Scalar>(
    data: &[T],
    rows: usize,
    cols: usize,
    cfg: QuantConfig,
) -> Result<QuantizedMatrix> {
    if cfg.block_size == 0 {
        return Err(Error::Config("quantization block size must be >= 1".into()));
    }
    if cfg.codebook == Codebook::LinearUnsigned && data.iter().any(|x| *x < T::zero()) {
        return Err(Error::Domain("unsigned codebook requires non-negative input".into()));
    }
    let levels = cfg.codebook.levels();
    let mut codes = Vec::with_capacity(data.len());
    let mut absmax = Vec::with_capacity(data.len().div_ceil(cfg.block_size));
    for block in data.chunks(cfg.block_size) {
        let max = block.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
        let scale = max as f32;
        absmax.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        let scale = f64::from(scale);
        for x in block {
            let q = round_half_away(x.as_f64() / scale * levels);
            let code = match cfg.codebook {
                Codebook::LinearSymmetric => q.clamp(-127.0, 127.0) as i8,
                Codebook::LinearUnsigned => q.clamp(0.0, 255.0) as u8 as i8,
            };
            codes.push(code);
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        block_size: cfg.block_size,
        codebook: cfg.codebook,
        codes,
        absmax,
    })
}

pub fn dequantize_blockwise<T: Scalar>(q: &QuantizedMatrix) -> Tensor<T> {
    let data = (0..q.len()).map(|i| T::of(q.value_at(i))).collect();
    Tensor::new_unchecked(q.rows, q.cols, data).expect("length matches by construction")
}

/// `x · dequantize(q)` without materializing the dense weight.
///
/// Rows of `q` are dequantized one at a time into a scratch buffer and
/// accumulated in the same order as [`Tensor::matmul`], so the result is
/// bitwise identical to the dense route.
pub fn quantized_matmul<T: Scalar>(x: &Tensor<T>, q: &QuantizedMatrix) -> Result<Tensor<T>> {
    if x.cols() != q.rows {
        return Err(Error::Shape {
            op: "quantized_matmul",
            lhs: x.shape(),
            rhs: q.shape(),
        });
    }
    let (m, k, n) = (x.rows(), q.rows, q.cols);
    let mut out = vec![T::zero(); m * n];
    let mut row = vec![T::zero(); n];
    let xd = x.data();
    for p in 0..k {
        q.dequantize_row_into(p, &mut row);
        for i in 0..m {
            let av = xd[i * k + p];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new_unchecked(m, n, out)
}

/// `out += g(m×n) · dequantize(q)ᵀ`, used for the input gradient.
pub(crate) fn quantized_matmul_nt_into<T: Scalar>(g: &[T], q: &QuantizedMatrix, out: &mut [T], m: usize) {
    let (k, n) = (q.rows, q.cols);
    let mut row = vec![T::zero(); n];
    for p in 0..k {
        q.dequantize_row_into(p, &mut row);
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for (&a, &b) in g_row.iter().zip(&row) {
                acc += a * b;
            }
            out[i * k + p] += acc;
        }
    }
}

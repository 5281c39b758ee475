//! Adam with optional blockwise 8-bit moment storage.
//!
//! When quantized, both moments live as [`QuantizedMatrix`] between steps:
//! the first moment on the symmetric grid, the second (non-negative) on the
//! unsigned grid. Each step dequantizes, applies the dense update, and
//! requantizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize_slice, Codebook, QuantConfig, QuantizedMatrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STATE_BLOCK: usize = 256;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_true")]
    pub bias_correction: bool,
    /// Decoupled weight decay; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global L2 norm clip applied to the gradients of one step.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            bias_correction: true,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Moment<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedMatrix),
}

impl<T: Scalar> Moment<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Moment::Dense(t) => t.shape(),
            Moment::Quantized(q) => q.shape(),
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        match self {
            Moment::Dense(t) => t.clone(),
            Moment::Quantized(q) => crate::quant::dequantize_blockwise(q),
        }
    }

    fn read_into(&self, out: &mut Vec<T>) {
        out.clear();
        match self {
            Moment::Dense(t) => out.extend_from_slice(t.data()),
            Moment::Quantized(q) => {
                out.resize(q.len(), T::zero());
                let cols = q.cols();
                for r in 0..q.rows() {
                    q.dequantize_row_into(r, &mut out[r * cols..(r + 1) * cols]);
                }
            }
        }
    }

    /// Serialized footprint in bytes (dense stores 4-byte floats).
    pub fn storage_bytes(&self) -> usize {
        match self {
            Moment::Dense(t) => 4 * t.len(),
            Moment::Quantized(q) => q.serialized_size(),
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState<T> {
    pub m: Vec<Moment<T>>,
    pub v: Vec<Moment<T>>,
    pub t: u64,
    /// `Some(block)` when moments are stored 8-bit.
    pub state_block_size: Option<usize>,
}

impl<T: Scalar> MomentState<T> {
    /// Zero moments for parameters of the given shapes.
    pub fn new(shapes: &[(usize, usize)], quantize: Option<usize>) -> Result<Self> {
        let zeros = |&(r, c): &(usize, usize)| Moment::Dense(Tensor::zeros(r, c));
        let mut s = Self {
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            t: 0,
            state_block_size: None,
        };
        if let Some(block) = quantize {
            s = quantize_moments(&s, block)?;
        }
        Ok(s)
    }

    pub fn is_quantized(&self) -> bool {
        self.state_block_size.is_some()
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn storage_bytes(&self) -> usize {
        self.m.iter().chain(&self.v).map(Moment::storage_bytes).sum()
    }
}

fn quantize_one<T: Scalar>(m: &Moment<T>, cfg: QuantConfig) -> Result<Moment<T>> {
    match m {
        Moment::Quantized(q) if q.codebook() == cfg.codebook && q.block_size() == cfg.block_size => Ok(m.clone()),
        _ => {
            let d = m.to_dense();
            Ok(Moment::Quantized(quantize_slice(d.data(), d.rows(), d.cols(), cfg)?))
        }
    }
}

/// Stores `m` on the signed grid and `v` on the unsigned grid.
pub fn quantize_moments<T: Scalar>(state: &MomentState<T>, block_size: usize) -> Result<MomentState<T>> {
    let mcfg = QuantConfig::new(block_size, Codebook::LinearSymmetric)?;
    let vcfg = QuantConfig::new(block_size, Codebook::LinearUnsigned)?;
    Ok(MomentState {
        m: state.m.iter().map(|m| quantize_one(m, mcfg)).collect::<Result<_>>()?,
        v: state.v.iter().map(|v| quantize_one(v, vcfg)).collect::<Result<_>>()?,
        t: state.t,
        state_block_size: Some(block_size),
    })
}

pub fn dequantize_moments<T: Scalar>(state: &MomentState<T>) -> MomentState<T> {
    let dense = |x: &Moment<T>| Moment::Dense(x.to_dense());
    MomentState {
        m: state.m.iter().map(dense).collect(),
        v: state.v.iter().map(dense).collect(),
        t: state.t,
        state_block_size: None,
    }
}

/// One Adam update of every trainable tensor in `params`.
///
/// Tensors without `requires_grad` are skipped and left bitwise unchanged.
/// All inputs are validated before anything is written, so an error leaves
/// parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut MomentState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape {
            op: "adam_step: parameter count",
            lhs: (params.len(), grads.len()),
            rhs: (state.len(), state.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: state.m[i].shape(),
            });
        }
        if p.requires_grad && g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }

    let clip = match cfg.grad_clip {
        Some(c) => {
            let sq: f64 = params
                .iter()
                .zip(grads)
                .filter(|(p, _)| p.requires_grad)
                .flat_map(|(_, g)| g.iter())
                .map(|x| x.as_f64() * x.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > c {
                T::of(c / norm)
            } else {
                T::one()
            }
        }
        None => T::one(),
    };

    let t = state.t + 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = if cfg.bias_correction {
        (
            T::one() - T::of(cfg.beta1.powi(t as i32)),
            T::one() - T::of(cfg.beta2.powi(t as i32)),
        )
    } else {
        (T::one(), T::one())
    };
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let decay = T::of(cfg.weight_decay);

    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.requires_grad {
            new_m.push(None);
            new_v.push(None);
            continue;
        }
        state.m[i].read_into(&mut m);
        state.v[i].read_into(&mut v);
        for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            let gi = gi * clip;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        new_m.push(Some(m.clone()));
        new_v.push(Some(v.clone()));
    }

    // Requantize first so that a failure cannot leave a half-applied step.
    let mut stored_m = Vec::with_capacity(params.len());
    let mut stored_v = Vec::with_capacity(params.len());
    for (i, (mi, vi)) in new_m.iter().zip(&new_v).enumerate() {
        let (rows, cols) = params[i].shape();
        match (mi, vi, state.state_block_size) {
            (Some(mi), Some(vi), Some(block)) => {
                let mq = quantize_slice(mi, rows, cols, QuantConfig::new(block, Codebook::LinearSymmetric)?)?;
                let vq = quantize_slice(vi, rows, cols, QuantConfig::new(block, Codebook::LinearUnsigned)?)?;
                stored_m.push(Some(Moment::Quantized(mq)));
                stored_v.push(Some(Moment::Quantized(vq)));
            }
            (Some(mi), Some(vi), None) => {
                stored_m.push(Some(Moment::Dense(Tensor::new_unchecked(rows, cols, mi.clone())?)));
                stored_v.push(Some(Moment::Dense(Tensor::new_unchecked(rows, cols, vi.clone())?)));
            }
            _ => {
                stored_m.push(None);
                stored_v.push(None);
            }
        }
    }

    // The update uses the exact (pre-requantization) moments of this step.
    for (i, p) in params.iter_mut().enumerate() {
        let (Some(mi), Some(vi)) = (&new_m[i], &new_v[i]) else {
            continue;
        };
        let data = p.data_mut();
        for ((w, &mi), &vi) in data.iter_mut().zip(mi).zip(vi) {
            let mhat = mi / c1;
            let vhat = vi / c2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
        }
    }
    for (i, (m, v)) in stored_m.into_iter().zip(stored_v).enumerate() {
        if let (Some(m), Some(v)) = (m, v) {
            state.m[i] = m;
            state.v[i] = v;
        }
    }
    state.t = t;
    Ok(())
}

/// Convenience wrapper owning the configuration and state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: MomentState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)], quantize: Option<usize>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: MomentState::new(shapes, quantize)?,
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }
}

//! Low-rank adapters over frozen (optionally 8-bit) base weights.
//!
//! `y = x·W + scale · (x·W_down)·W_up`, with `W` frozen and only the two thin
//! factors trainable. `W_up` starts at zero so a fresh adapter is a no-op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{dequantize_blockwise, quantize_blockwise, QuantConfig, QuantizedMatrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where an adapter sits inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    FfnIn,
    FfnOut,
    FinalHidden,
    AttnQ,
    AttnV,
}

impl AttachPoint {
    pub fn name(self) -> &'static str {
        match self {
            AttachPoint::FfnIn => "ffn_in",
            AttachPoint::FfnOut => "ffn_out",
            AttachPoint::FinalHidden => "final_hidden",
            AttachPoint::AttnQ => "attn_q",
            AttachPoint::AttnV => "attn_v",
        }
    }

    /// FFN layers plus the final hidden projection.
    pub fn defaults() -> Vec<AttachPoint> {
        vec![AttachPoint::FfnIn, AttachPoint::FfnOut, AttachPoint::FinalHidden]
    }
}

/// A frozen weight matrix, stored dense or blockwise-quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenWeight<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedMatrix),
}

impl<T: Scalar> FrozenWeight<T> {
    pub fn dense(mut w: Tensor<T>) -> Self {
        w.requires_grad = false;
        FrozenWeight::Dense(w)
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            FrozenWeight::Dense(w) => w.shape(),
            FrozenWeight::Quantized(q) => q.shape(),
        }
    }

    pub fn num_params(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, FrozenWeight::Quantized(_))
    }

    /// Dense view (dequantizing if needed).
    pub fn to_dense(&self) -> Tensor<T> {
        match self {
            FrozenWeight::Dense(w) => w.clone(),
            FrozenWeight::Quantized(q) => dequantize_blockwise(q),
        }
    }

    /// Replaces a dense weight by its blockwise quantization; no-op if already quantized.
    pub fn quantize(&mut self, cfg: QuantConfig) -> Result<()> {
        if let FrozenWeight::Dense(w) = self {
            *self = FrozenWeight::Quantized(quantize_blockwise(w, cfg)?);
        }
        Ok(())
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        match self {
            FrozenWeight::Dense(w) => {
                let wv = tape.param(w);
                tape.matmul(x, wv)
            }
            FrozenWeight::Quantized(q) => tape.quantized_matmul(x, q),
        }
    }

    pub fn checksum(&self) -> u64 {
        match self {
            FrozenWeight::Dense(w) => w.checksum(),
            FrozenWeight::Quantized(q) => {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                let bytes = q.to_bytes();
                for b in bytes {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                h
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear<T> {
    pub base: FrozenWeight<T>,
    /// `d×r`, trainable.
    pub down: Tensor<T>,
    /// `r×k`, trainable.
    pub up: Tensor<T>,
    pub scale: T,
    pub attach: AttachPoint,
}

/// Builds an adapter over `base` (`d×k`): `W_down ~ N(0, 1/r)` from `seed`, `W_up = 0`.
pub fn init_lora<T: Scalar>(base: FrozenWeight<T>, rank: usize, seed: u64, attach: AttachPoint) -> Result<LoraLinear<T>> {
    let (d, k) = base.shape();
    if rank == 0 || rank > d.min(k) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} outside [1, {}] for a {d}x{k} weight",
            d.min(k)
        )));
    }
    if rank * 4 > d.min(k) {
        log::warn!(
            "LoRA rank {rank} is not small relative to min({d}, {k}) for {}",
            attach.name()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / rank as f64).sqrt();
    Ok(LoraLinear {
        base,
        down: Tensor::randn(d, rank, std, &mut rng).trainable(),
        up: Tensor::zeros(rank, k).trainable(),
        scale: T::one(),
        attach,
    })
}

impl<T: Scalar> LoraLinear<T> {
    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    /// `(d, k)` of the adapted weight.
    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let base = self.base.forward(tape, x)?;
        let down = tape.param(&self.down);
        let up = tape.param(&self.up);
        let h = tape.matmul(x, down)?;
        let mut delta = tape.matmul(h, up)?;
        if self.scale != T::one() {
            delta = tape.scale(delta, self.scale);
        }
        tape.add(base, delta)
    }

    /// `dequantize(W) + scale · W_down·W_up`.
    pub fn merge(&self) -> Result<Tensor<T>> {
        let delta = self.down.matmul(&self.up)?.scale(self.scale);
        self.base.to_dense().add(&delta)
    }

    pub fn trainable(&self) -> [&Tensor<T>; 2] {
        [&self.down, &self.up]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.down, &mut self.up]
    }

    pub fn counts(&self) -> ParamCounts {
        ParamCounts {
            trainable: self.down.len() + self.up.len(),
            frozen: self.base.num_params(),
        }
    }
}

/// Scalar parameter counts, split by trainability.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    /// Trainable share of all scalars; 0 for an empty model.
    pub fn fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total() as f64
        }
    }
}

impl std::ops::Add for ParamCounts {
    type Output = ParamCounts;

    fn add(self, o: ParamCounts) -> ParamCounts {
        ParamCounts {
            trainable: self.trainable + o.trainable,
            frozen: self.frozen + o.frozen,
        }
    }
}

impl std::iter::Sum for ParamCounts {
    fn sum<I: Iterator<Item = ParamCounts>>(iter: I) -> Self {
        iter.fold(ParamCounts::default(), |a, b| a + b)
    }
}

pub trait CountParams {
    fn param_counts(&self) -> ParamCounts;
}

impl<T: Scalar> CountParams for LoraLinear<T> {
    fn param_counts(&self) -> ParamCounts {
        self.counts()
    }
}

pub fn trainable_fraction<M: CountParams + ?Sized>(model: &M) -> f64 {
    model.param_counts().fraction()
}

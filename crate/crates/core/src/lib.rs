//! Parameter-efficient contrastive fine-tuning of small sentence encoders:
//! blockwise 8-bit weight quantization, LoRA adapters, 8-bit Adam, a Siamese
//! multiple-negatives-ranking objective and STS-style Spearman evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lora;
pub mod objective;
pub mod optim;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use data::{synth_corpus, NliLabel, NliRecord, Pair, StsRecord};
pub use encoder::{AttentionMask, EncoderConfig, SentenceEncoder, TokenBatch, Vocab};
pub use error::{Error, Result};
pub use eval::{spearman, sts_eval, EvalReport, SpearmanScores};
pub use optim::{adam_step, dequantize_moments, quantize_moments, Adam, AdamConfig, Moment, MomentState};
pub use objective::{mnr_accuracy, mnr_loss, mnr_loss_value, similarity, MnrConfig, Reduction, SimilarityKind};
pub use lora::{init_lora, trainable_fraction, AttachPoint, FrozenWeight, LoraLinear, ParamCounts};
pub use quant::{Codebook, QuantConfig, QuantizedMatrix};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{train, QuantizationConfig, RunConfig, TrainOutcome, TrainSummary};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Encoder32 = SentenceEncoder<f32>;
pub type Encoder64 = SentenceEncoder<f64>;

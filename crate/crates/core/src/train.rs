//! Run configuration and the contrastive training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{make_batches, MiniBatch, Pair};
use crate::encoder::{EncoderConfig, SentenceEncoder, Vocab};
use crate::error::{Error, Result};
use crate::lora::trainable_fraction;
use crate::objective::{mnr_accuracy, mnr_loss, MnrConfig};
use crate::optim::{AdamConfig, MomentState, DEFAULT_STATE_BLOCK};
use crate::quant::QuantConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_state_block() -> Option<usize> {
    Some(DEFAULT_STATE_BLOCK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    /// Block size for the frozen base weights; `None` keeps them dense.
    #[serde(default)]
    pub base_block_size: Option<usize>,
    /// Block size for the 8-bit optimizer moments; `None` keeps them dense.
    #[serde(default = "default_state_block")]
    pub state_block_size: Option<usize>,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            base_block_size: None,
            state_block_size: default_state_block(),
        }
    }
}

fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_val_fraction() -> f64 {
    0.1
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mnr: MnrConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub quantization: QuantizationConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Seeds the validation split and the per-epoch batch shuffles.
    pub seed: u64,
    /// Keep duplicate premises out of the same batch.
    #[serde(default = "default_true")]
    pub dedup: bool,
    /// Share of the entailment pairs held out for validation loss.
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    /// Batch size of the validation pass, fixed so losses compare across runs.
    #[serde(default = "default_batch")]
    pub val_batch_size: usize,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mnr: MnrConfig::default(),
            adam: AdamConfig::default(),
            quantization: QuantizationConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 7,
            dedup: true,
            validation_fraction: default_val_fraction(),
            val_batch_size: default_batch(),
            train_data: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mnr.validate()?;
        // lr = 0 is a legal no-op run; everything else follows the optimizer rules.
        AdamConfig {
            lr: if self.adam.lr == 0.0 { 1.0 } else { self.adam.lr },
            ..self.adam
        }
        .validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (in-batch negatives)".into()));
        }
        if self.val_batch_size < 2 {
            return Err(Error::Config("val_batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        for b in [self.quantization.base_block_size, self.quantization.state_block_size]
            .into_iter()
            .flatten()
        {
            if b == 0 {
                return Err(Error::Config("quantization block sizes must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Parses JSON; any syntax, type or validation problem is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub steps: usize,
    /// Mean batch loss over the first epoch's batches before any update.
    pub initial_loss: f64,
    /// Mean batch loss over the same batches after training.
    pub final_loss: f64,
    /// Mean of the per-step losses observed during the last epoch.
    pub last_epoch_running_loss: Option<f64>,
    /// Mean per-pair loss on the held-out pairs after training.
    pub validation_loss: Option<f64>,
    pub trainable_fraction: f64,
    pub frozen_checksum_unchanged: bool,
}

pub struct TrainOutcome<T> {
    pub model: SentenceEncoder<T>,
    pub vocab: Vocab,
    pub optimizer: MomentState<T>,
    pub metrics: Vec<StepMetrics>,
    pub summary: TrainSummary,
}

/// Seeded hold-out split: returns (train, validation), each in input order.
pub fn split_validation(pairs: &[Pair], fraction: f64, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    let n_val = (pairs.len() as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    idx.shuffle(&mut rng);
    let mut is_val = vec![false; pairs.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (p, v) in pairs.iter().zip(is_val) {
        if v {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, val)
}

/// Builds the vocabulary from every sentence of the training corpus.
pub fn build_vocab(pairs: &[Pair], vocab_size: usize) -> Vocab {
    Vocab::build(
        pairs.iter().flat_map(|p| [p.premise.as_str(), p.hypothesis.as_str()]),
        vocab_size,
    )
}

/// Fresh encoder for a run, base-quantized if configured.
pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<SentenceEncoder<T>> {
    let mut model = SentenceEncoder::new(cfg.encoder.clone())?;
    if let Some(b) = cfg.quantization.base_block_size {
        model.quantize_base(QuantConfig::symmetric(b)?)?;
    }
    Ok(model)
}

/// Loss and in-batch accuracy of one batch, without gradients.
pub fn batch_loss<T: Scalar>(
    model: &SentenceEncoder<T>,
    vocab: &Vocab,
    pairs: &[Pair],
    batch: &MiniBatch,
    mnr: &MnrConfig,
) -> Result<(f64, f64)> {
    let (p, h) = batch.tokens(pairs, vocab, model.config().max_seq_len);
    let mut tape = Tape::no_grad();
    let (u, v) = model.siamese_encode_pair(&mut tape, &p, &h)?;
    let loss = mnr_loss(&mut tape, u, v, mnr)?;
    let l = tape.value(loss).data()[0].as_f64();
    if !l.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((l, mnr_accuracy(tape.value(u), tape.value(v))))
}

fn mean_loss<T: Scalar>(
    model: &SentenceEncoder<T>,
    vocab: &Vocab,
    pairs: &[Pair],
    batches: &[MiniBatch],
    mnr: &MnrConfig,
    per_pair: bool,
) -> Result<Option<f64>> {
    if batches.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for b in batches {
        let (l, _) = batch_loss(model, vocab, pairs, b, mnr)?;
        total += if per_pair { l / b.len() as f64 } else { l };
    }
    Ok(Some(total / batches.len() as f64))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

/// Trains the adapters on `pairs` and reports per-step metrics.
///
/// `on_step` observes each step as it completes (used for streaming metrics).
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    pairs: &[Pair],
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Data(format!("need at least 2 entailment pairs, found {}", pairs.len())));
    }
    let vocab = build_vocab(pairs, cfg.encoder.vocab_size);
    let (train_pairs, val_pairs) = split_validation(pairs, cfg.validation_fraction, cfg.seed);
    let mut model: SentenceEncoder<T> = build_model(cfg)?;
    let checksum = model.frozen_checksum();

    let shapes: Vec<(usize, usize)> = model.trainable_params().iter().map(|(_, t)| t.shape()).collect();
    let adam_cfg = cfg.adam;
    let mut optimizer = MomentState::new(&shapes, cfg.quantization.state_block_size)?;

    let first_batches = make_batches(&train_pairs, cfg.batch_size, epoch_seed(cfg.seed, 0), cfg.dedup)?;
    if first_batches.is_empty() {
        return Err(Error::Data("training split yields no batch of at least 2 pairs".into()));
    }
    let val_batches = make_batches(&val_pairs, cfg.val_batch_size, cfg.seed, cfg.dedup)?;
    let initial_loss = mean_loss(&model, &vocab, &train_pairs, &first_batches, &cfg.mnr, false)?
        .expect("non-empty batches");

    let mut metrics = Vec::new();
    let mut last_epoch = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = if epoch == 0 {
            first_batches.clone()
        } else {
            make_batches(&train_pairs, cfg.batch_size, epoch_seed(cfg.seed, epoch), cfg.dedup)?
        };
        last_epoch.clear();
        for batch in &batches {
            let (p, h) = batch.tokens(&train_pairs, &vocab, cfg.encoder.max_seq_len);
            let (loss, acc, grads) = {
                let mut tape = Tape::new();
                let (u, v) = model.siamese_encode_pair(&mut tape, &p, &h)?;
                let l = mnr_loss(&mut tape, u, v, &cfg.mnr)?;
                let loss = tape.value(l).data()[0].as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss at step {}", metrics.len() + 1)));
                }
                let acc = mnr_accuracy(tape.value(u), tape.value(v));
                let g = tape.backward(l)?;
                let grads: Vec<Vec<T>> = model
                    .trainable_params()
                    .iter()
                    .map(|(_, t)| g.of(t).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
                    .collect();
                (loss, acc, grads)
            };
            if adam_cfg.lr > 0.0 {
                let g: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
                let mut params: Vec<&mut Tensor<T>> =
                    model.trainable_params_mut().into_iter().map(|(_, t)| t).collect();
                crate::optim::adam_step(&mut params, &g, &mut optimizer, &adam_cfg)?;
            }
            let m = StepMetrics {
                step: metrics.len() + 1,
                loss,
                acc,
            };
            on_step(&m)?;
            metrics.push(m);
            last_epoch.push(loss);
        }
    }

    let final_loss = mean_loss(&model, &vocab, &train_pairs, &first_batches, &cfg.mnr, false)?
        .expect("non-empty batches");
    let validation_loss = mean_loss(&model, &vocab, &val_pairs, &val_batches, &cfg.mnr, true)?;
    let summary = TrainSummary {
        train_pairs: train_pairs.len(),
        validation_pairs: val_pairs.len(),
        steps: metrics.len(),
        initial_loss,
        final_loss,
        last_epoch_running_loss: (!last_epoch.is_empty())
            .then(|| last_epoch.iter().sum::<f64>() / last_epoch.len() as f64),
        validation_loss,
        trainable_fraction: trainable_fraction(&model),
        frozen_checksum_unchanged: model.frozen_checksum() == checksum,
    };
    Ok(TrainOutcome {
        model,
        vocab,
        optimizer,
        metrics,
        summary,
    })
}

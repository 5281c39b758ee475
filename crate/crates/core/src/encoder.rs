//! Small pre-norm transformer used as a weight-tied (Siamese) sentence encoder.
//!
//! Token and learned position embeddings feed `n_layers` blocks of
//! self-attention plus a GELU feed-forward network; a final layer norm and a
//! hidden projection follow, and masked mean pooling over non-pad positions
//! yields one embedding per sentence. All base weights are frozen and may be
//! stored 8-bit; only LoRA factors (and optionally the embedding tables) train.

use std::collections::{BTreeSet, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{init_lora, AttachPoint, CountParams, FrozenWeight, LoraLinear, ParamCounts};
use crate::quant::QuantConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMask {
    /// Position `i` attends to `j <= i` (decoder-style).
    Causal,
    Bidirectional,
}

fn default_lora_scale() -> f64 {
    1.0
}

fn default_attention() -> AttentionMask {
    AttentionMask::Causal
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_attach_points: BTreeSet<AttachPoint>,
    #[serde(default = "default_lora_scale")]
    pub lora_scale: f64,
    #[serde(default = "default_attention")]
    pub attention: AttentionMask,
    #[serde(default)]
    pub train_embeddings: bool,
    /// Standard deviation of the frozen random base weights.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Standard deviation of the position table; `None` uses `init_std`.
    #[serde(default)]
    pub position_init_std: Option<f64>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 32,
            lora_rank: 4,
            lora_attach_points: AttachPoint::defaults().into_iter().collect(),
            lora_scale: 1.0,
            attention: AttentionMask::Causal,
            train_embeddings: false,
            init_std: default_init_std(),
            position_init_std: None,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must leave room for <pad> and <unk>".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.lora_scale.is_finite() && self.lora_scale > 0.0) {
            return Err(Error::Config("lora_scale must be positive".into()));
        }
        for std in [Some(self.init_std), self.position_init_std].into_iter().flatten() {
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::Config("init standard deviations must be positive".into()));
            }
        }
        if !self.lora_attach_points.is_empty() {
            let limit = self
                .lora_attach_points
                .iter()
                .map(|&p| {
                    let (d, k) = self.layer_shape(p);
                    d.min(k)
                })
                .min()
                .unwrap_or(usize::MAX);
            if self.lora_rank == 0 || self.lora_rank > limit {
                return Err(Error::Config(format!(
                    "lora_rank {} outside [1, {limit}]",
                    self.lora_rank
                )));
            }
        }
        Ok(())
    }

    fn layer_shape(&self, p: AttachPoint) -> (usize, usize) {
        match p {
            AttachPoint::FfnIn => (self.d_model, self.d_ff),
            AttachPoint::FfnOut => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Parameter counts implied by the configuration alone.
    pub fn param_counts(&self) -> ParamCounts {
        let d = self.d_model;
        let r = self.lora_rank;
        let adapter = |p: AttachPoint| {
            if self.lora_attach_points.contains(&p) {
                let (a, b) = self.layer_shape(p);
                r * (a + b)
            } else {
                0
            }
        };
        let embeddings = (self.vocab_size + self.max_seq_len) * d;
        let per_layer_frozen = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        let per_layer_adapters: usize = [
            AttachPoint::AttnQ,
            AttachPoint::AttnV,
            AttachPoint::FfnIn,
            AttachPoint::FfnOut,
        ]
        .into_iter()
        .map(adapter)
        .sum();
        let (emb_frozen, emb_trainable) = if self.train_embeddings {
            (0, embeddings)
        } else {
            (embeddings, 0)
        };
        ParamCounts {
            trainable: emb_trainable + self.n_layers * per_layer_adapters + adapter(AttachPoint::FinalHidden),
            frozen: emb_frozen + self.n_layers * per_layer_frozen + 2 * d + d * d,
        }
    }
}

/// Word-level vocabulary with reserved `<pad>` (0) and `<unk>` (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Most frequent lowercased whitespace tokens first, ties broken
    /// lexically, capped so the total size (with reserved ids) is `vocab_size`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        counts.remove(PAD_TOKEN);
        counts.remove(UNK_TOKEN);
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = vocab_size.saturating_sub(2);
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Checkpoint("duplicate vocabulary entries".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace split, lowercase, lookup; unknown words map to `<unk>`.
    /// Never empty: an empty string becomes `[<unk>]`. Truncated at `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = words(text)
            .take(max_len)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }

    pub fn batch<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> TokenBatch {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t.as_ref(), max_len)).collect();
        TokenBatch::from_sequences(&seqs)
    }
}

/// Right-padded id matrix (`n×T`) with its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    mask: Vec<bool>,
    n: usize,
    len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, n: usize, len: usize) -> Result<Self> {
        if ids.len() != n * len || mask.len() != n * len {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: (n, len),
                rhs: (ids.len(), mask.len()),
            });
        }
        Ok(Self { ids, mask, n, len })
    }

    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for t in 0..len {
                ids.push(s.get(t).copied().unwrap_or(PAD_ID));
                mask.push(t < s.len());
            }
        }
        Self {
            ids,
            mask,
            n: seqs.len(),
            len,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn row_mask(&self, s: usize) -> &[bool] {
        &self.mask[s * self.len..(s + 1) * self.len]
    }

    /// Rows `rows` (in that order) as a new batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.len);
        let mut mask = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            ids.extend_from_slice(&self.ids[r * self.len..(r + 1) * self.len]);
            mask.extend_from_slice(self.row_mask(r));
        }
        Self {
            ids,
            mask,
            n: rows.len(),
            len: self.len,
        }
    }
}

/// A projection that is either purely frozen or carries a LoRA adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear<T> {
    Frozen(FrozenWeight<T>),
    Lora(LoraLinear<T>),
}

impl<T: Scalar> Linear<T> {
    fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        match self {
            Linear::Frozen(w) => w.forward(tape, x),
            Linear::Lora(l) => l.forward(tape, x),
        }
    }

    pub fn base(&self) -> &FrozenWeight<T> {
        match self {
            Linear::Frozen(w) => w,
            Linear::Lora(l) => &l.base,
        }
    }

    pub fn adapter(&self) -> Option<&LoraLinear<T>> {
        match self {
            Linear::Frozen(_) => None,
            Linear::Lora(l) => Some(l),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        match self {
            Linear::Frozen(w) => f(format!("{name}.weight"), Slot::Weight(w)),
            Linear::Lora(l) => {
                f(format!("{name}.weight"), Slot::Weight(&l.base));
                f(format!("{name}.lora_down"), Slot::Param(&l.down));
                f(format!("{name}.lora_up"), Slot::Param(&l.up));
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        match self {
            Linear::Frozen(w) => f(format!("{name}.weight"), SlotMut::Weight(w)),
            Linear::Lora(l) => {
                f(format!("{name}.weight"), SlotMut::Weight(&mut l.base));
                f(format!("{name}.lora_down"), SlotMut::Param(&mut l.down));
                f(format!("{name}.lora_up"), SlotMut::Param(&mut l.up));
            }
        }
    }
}

/// Embedding table: frozen (possibly quantized) or trainable.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding<T> {
    Frozen(FrozenWeight<T>),
    Trainable(Tensor<T>),
}

impl<T: Scalar> Embedding<T> {
    fn gather<'p>(&'p self, tape: &mut Tape<'p, T>, ids: &[usize]) -> Result<Var> {
        match self {
            Embedding::Trainable(t) => {
                let v = tape.param(t);
                tape.gather_rows(v, ids)
            }
            Embedding::Frozen(FrozenWeight::Dense(t)) => {
                let v = tape.param(t);
                tape.gather_rows(v, ids)
            }
            Embedding::Frozen(FrozenWeight::Quantized(q)) => {
                let d = q.cols();
                let mut out = vec![T::zero(); ids.len() * d];
                for (r, &id) in ids.iter().enumerate() {
                    if id >= q.rows() {
                        return Err(Error::Shape {
                            op: "gather_rows",
                            lhs: q.shape(),
                            rhs: (id, 0),
                        });
                    }
                    q.dequantize_row_into(id, &mut out[r * d..(r + 1) * d]);
                }
                Ok(tape.constant(Tensor::new_unchecked(ids.len(), d, out)?))
            }
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        match self {
            Embedding::Frozen(w) => f(name.to_string(), Slot::Weight(w)),
            Embedding::Trainable(t) => f(name.to_string(), Slot::Param(t)),
        }
    }

    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        match self {
            Embedding::Frozen(w) => f(name.to_string(), SlotMut::Weight(w)),
            Embedding::Trainable(t) => f(name.to_string(), SlotMut::Param(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(1, d, T::one()),
            bias: Tensor::zeros(1, d),
        }
    }

    fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn_q: Linear<T>,
    pub attn_k: Linear<T>,
    pub attn_v: Linear<T>,
    pub attn_o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// Borrowed view of one named tensor slot.
pub enum Slot<'a, T> {
    /// Dense tensor; trainable iff `requires_grad`.
    Param(&'a Tensor<T>),
    /// Frozen weight matrix, dense or quantized.
    Weight(&'a FrozenWeight<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Tensor<T>),
    Weight(&'a mut FrozenWeight<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoder<T> {
    config: EncoderConfig,
    pub tok_emb: Embedding<T>,
    pub pos_emb: Embedding<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub final_hidden: Linear<T>,
}

impl<T: Scalar> SentenceEncoder<T> {
    /// Seeded random base weights plus fresh adapters at the configured
    /// attach points. Base weights depend only on the architecture fields and
    /// the seed, never on the adapter settings.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = config.init_std;
        let mut base_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(config.seed);
        adapter_rng.set_stream(1);

        let pos_std = config.position_init_std.unwrap_or(std);
        let tok = FrozenWeight::dense(Tensor::randn(config.vocab_size, d, std, &mut base_rng));
        let pos = FrozenWeight::dense(Tensor::randn(config.max_seq_len, d, pos_std, &mut base_rng));
        let mut weight = |rows: usize, cols: usize| FrozenWeight::dense(Tensor::randn(rows, cols, std, &mut base_rng));
        let mut raw_blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            raw_blocks.push([
                weight(d, d),
                weight(d, d),
                weight(d, d),
                weight(d, d),
                weight(d, config.d_ff),
                weight(config.d_ff, d),
            ]);
        }
        let final_w = weight(d, d);

        let mut linear = |w: FrozenWeight<T>, point: AttachPoint| -> Result<Linear<T>> {
            if config.lora_attach_points.contains(&point) {
                let seed = adapter_rng.next_u64();
                let layer = init_lora(w, config.lora_rank, seed, point)?.with_scale(T::of(config.lora_scale));
                Ok(Linear::Lora(layer))
            } else {
                Ok(Linear::Frozen(w))
            }
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for [q, k, v, o, fi, fo] in raw_blocks {
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn_q: linear(q, AttachPoint::AttnQ)?,
                attn_k: Linear::Frozen(k),
                attn_v: linear(v, AttachPoint::AttnV)?,
                attn_o: Linear::Frozen(o),
                ln2: LayerNorm::new(d),
                ffn_in: linear(fi, AttachPoint::FfnIn)?,
                ffn_out: linear(fo, AttachPoint::FfnOut)?,
            });
        }
        let final_hidden = linear(final_w, AttachPoint::FinalHidden)?;

        let table = |w: FrozenWeight<T>| {
            if config.train_embeddings {
                Embedding::Trainable(w.to_dense().trainable())
            } else {
                Embedding::Frozen(w)
            }
        };
        Ok(Self {
            tok_emb: table(tok),
            pos_emb: table(pos),
            blocks,
            ln_f: LayerNorm::new(d),
            final_hidden,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.d_model
    }

    /// Visits every named tensor in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.tok_emb.visit("tok_emb", f);
        self.pos_emb.visit("pos_emb", f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            f(format!("{p}.ln1.gain"), Slot::Param(&b.ln1.gain));
            f(format!("{p}.ln1.bias"), Slot::Param(&b.ln1.bias));
            b.attn_q.visit(&format!("{p}.attn_q"), f);
            b.attn_k.visit(&format!("{p}.attn_k"), f);
            b.attn_v.visit(&format!("{p}.attn_v"), f);
            b.attn_o.visit(&format!("{p}.attn_o"), f);
            f(format!("{p}.ln2.gain"), Slot::Param(&b.ln2.gain));
            f(format!("{p}.ln2.bias"), Slot::Param(&b.ln2.bias));
            b.ffn_in.visit(&format!("{p}.ffn_in"), f);
            b.ffn_out.visit(&format!("{p}.ffn_out"), f);
        }
        f("ln_f.gain".into(), Slot::Param(&self.ln_f.gain));
        f("ln_f.bias".into(), Slot::Param(&self.ln_f.bias));
        self.final_hidden.visit("final_hidden", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.tok_emb.visit_mut("tok_emb", f);
        self.pos_emb.visit_mut("pos_emb", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(format!("{p}.ln1.gain"), SlotMut::Param(&mut b.ln1.gain));
            f(format!("{p}.ln1.bias"), SlotMut::Param(&mut b.ln1.bias));
            b.attn_q.visit_mut(&format!("{p}.attn_q"), f);
            b.attn_k.visit_mut(&format!("{p}.attn_k"), f);
            b.attn_v.visit_mut(&format!("{p}.attn_v"), f);
            b.attn_o.visit_mut(&format!("{p}.attn_o"), f);
            f(format!("{p}.ln2.gain"), SlotMut::Param(&mut b.ln2.gain));
            f(format!("{p}.ln2.bias"), SlotMut::Param(&mut b.ln2.bias));
            b.ffn_in.visit_mut(&format!("{p}.ffn_in"), f);
            b.ffn_out.visit_mut(&format!("{p}.ffn_out"), f);
        }
        f("ln_f.gain".into(), SlotMut::Param(&mut self.ln_f.gain));
        f("ln_f.bias".into(), SlotMut::Param(&mut self.ln_f.bias));
        self.final_hidden.visit_mut("final_hidden", f);
    }

    /// Trainable tensors with their names, in visiting order.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, slot| {
            if let Slot::Param(t) = slot {
                if t.requires_grad {
                    out.push((name, t));
                }
            }
        });
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, slot| {
            if let SlotMut::Param(t) = slot {
                if t.requires_grad {
                    out.push((name, t));
                }
            }
        });
        out
    }

    /// Checksum over every frozen tensor, in visiting order.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit(&mut |_, slot| {
            let c = match slot {
                Slot::Param(t) if !t.requires_grad => t.checksum(),
                Slot::Weight(w) => w.checksum(),
                _ => return,
            };
            h = (h ^ c).wrapping_mul(0x0000_0100_0000_01b3);
        });
        h
    }

    /// Stores every frozen weight matrix blockwise-quantized.
    pub fn quantize_base(&mut self, cfg: QuantConfig) -> Result<()> {
        let mut result = Ok(());
        self.visit_mut(&mut |_, slot| {
            if let SlotMut::Weight(w) = slot {
                if result.is_ok() {
                    result = w.quantize(cfg);
                }
            }
        });
        result
    }

    pub fn is_quantized(&self) -> bool {
        let mut any = false;
        self.visit(&mut |_, slot| {
            if let Slot::Weight(w) = slot {
                any |= w.is_quantized();
            }
        });
        any
    }

    /// Records the forward pass for `batch` and returns the `n×d_model`
    /// pooled embeddings.
    pub fn encode<'p>(&'p self, tape: &mut Tape<'p, T>, batch: &TokenBatch) -> Result<Var> {
        let cfg = &self.config;
        let (n, len) = (batch.n(), batch.seq_len());
        if n == 0 {
            return Err(Error::Shape {
                op: "encode",
                lhs: (0, len),
                rhs: (1, 1),
            });
        }
        if len > cfg.max_seq_len {
            return Err(Error::Shape {
                op: "encode: sequence longer than max_seq_len",
                lhs: (n, len),
                rhs: (n, cfg.max_seq_len),
            });
        }
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let tok = self.tok_emb.gather(tape, batch.ids())?;
        let pos = self.pos_emb.gather(tape, &positions)?;
        let mut x = tape.add(tok, pos)?;

        // keep[s][i*len + j]: may query i of sentence s attend to key j?
        let keeps: Vec<Vec<bool>> = (0..n)
            .map(|s| {
                let m = batch.row_mask(s);
                let mut keep = vec![false; len * len];
                for i in 0..len {
                    for j in 0..len {
                        let visible = cfg.attention == AttentionMask::Bidirectional || j <= i;
                        keep[i * len + j] = visible && m[j];
                    }
                }
                keep
            })
            .collect();

        let dh = cfg.d_model / cfg.n_heads;
        let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
        for block in &self.blocks {
            let h = block.ln1.forward(tape, x)?;
            let q = block.attn_q.forward(tape, h)?;
            let k = block.attn_k.forward(tape, h)?;
            let v = block.attn_v.forward(tape, h)?;
            let mut sentences = Vec::with_capacity(n);
            for (s, keep) in keeps.iter().enumerate() {
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for head in 0..cfg.n_heads {
                    let qs = tape.slice(q, s * len, len, head * dh, dh)?;
                    let ks = tape.slice(k, s * len, len, head * dh, dh)?;
                    let vs = tape.slice(v, s * len, len, head * dh, dh)?;
                    let kt = tape.transpose(ks);
                    let scores = tape.matmul(qs, kt)?;
                    let scores = tape.scale(scores, inv_sqrt);
                    let probs = tape.softmax_rows_masked(scores, keep)?;
                    heads.push(tape.matmul(probs, vs)?);
                }
                sentences.push(tape.concat_cols(&heads)?);
            }
            let attn = tape.concat_rows(&sentences)?;
            let attn = block.attn_o.forward(tape, attn)?;
            x = tape.add(x, attn)?;

            let h = block.ln2.forward(tape, x)?;
            let f = block.ffn_in.forward(tape, h)?;
            let f = tape.gelu(f);
            let f = block.ffn_out.forward(tape, f)?;
            x = tape.add(x, f)?;
        }
        let h = self.ln_f.forward(tape, x)?;
        let y = self.final_hidden.forward(tape, h)?;
        let mut pooled = Vec::with_capacity(n);
        for s in 0..n {
            let rows = tape.slice(y, s * len, len, 0, cfg.d_model)?;
            pooled.push(tape.masked_mean_rows(rows, batch.row_mask(s))?);
        }
        tape.concat_rows(&pooled)
    }

    /// Encodes both sides with the same weights (the Siamese tie).
    pub fn siamese_encode_pair<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        premises: &TokenBatch,
        hypotheses: &TokenBatch,
    ) -> Result<(Var, Var)> {
        if premises.n() != hypotheses.n() {
            return Err(Error::Shape {
                op: "siamese_encode_pair",
                lhs: (premises.n(), premises.seq_len()),
                rhs: (hypotheses.n(), hypotheses.seq_len()),
            });
        }
        let u = self.encode(tape, premises)?;
        let v = self.encode(tape, hypotheses)?;
        Ok((u, v))
    }

    /// Inference-only embeddings.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let out = self.encode(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Scalar> CountParams for SentenceEncoder<T> {
    fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        self.visit(&mut |_, slot| match slot {
            Slot::Param(t) if t.requires_grad => counts.trainable += t.len(),
            Slot::Param(t) => counts.frozen += t.len(),
            Slot::Weight(w) => counts.frozen += w.num_params(),
        });
        counts
    }
}

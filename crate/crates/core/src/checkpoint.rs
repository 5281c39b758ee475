//! Binary checkpoint container.
//!
//! ```text
//! "LACS" | version: u32 LE | header_len: u32 LE | JSON header | payload
//! ```
//!
//! The header carries the encoder config, the vocabulary and a manifest
//! mapping tensor names to dtype (`f32` or `q8`), shape, and the byte range
//! inside the payload. Dense tensors are little-endian `f32`; `q8` tensors use
//! the quantized-matrix encoding. Adapter-only checkpoints hold just the
//! trainable tensors: the frozen base is rebuilt from the config seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, SentenceEncoder, Slot, SlotMut, Vocab};
use crate::error::{Error, Result};
use crate::lora::FrozenWeight;
use crate::optim::{Moment, MomentState};
use crate::quant::{QuantConfig, QuantizedMatrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LACS";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Q8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: EncoderConfig,
    /// Quantization applied to the frozen base, if any. Adapter-only
    /// checkpoints use it to rebuild the same base on load.
    pub base_quantization: Option<QuantConfig>,
    pub vocab: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Header {
    pub fn payload_bytes(&self) -> u64 {
        self.tensors.values().map(|e| e.offset + e.length).max().unwrap_or(0)
    }
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub kind: CheckpointKind,
    pub model: SentenceEncoder<T>,
    pub vocab: Vocab,
    pub optimizer: Option<MomentState<T>>,
}

fn f32_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.as_f32().to_le_bytes()).collect()
}

/// Quantization config of the model's frozen weights, if they are quantized.
pub fn base_quantization<T: Scalar>(model: &SentenceEncoder<T>) -> Option<QuantConfig> {
    let mut found = None;
    model.visit(&mut |_, slot| {
        if let Slot::Weight(FrozenWeight::Quantized(q)) = slot {
            found.get_or_insert(QuantConfig {
                block_size: q.block_size(),
                codebook: q.codebook(),
            });
        }
    });
    found
}

struct Writer {
    tensors: BTreeMap<String, TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: DType, shape: (usize, usize), bytes: Vec<u8>) {
        let entry = TensorEntry {
            dtype,
            shape: [shape.0, shape.1],
            offset: self.payload.len() as u64,
            length: bytes.len() as u64,
        };
        self.payload.extend(bytes);
        self.tensors.insert(name, entry);
    }

    fn dense<T: Scalar>(&mut self, name: String, t: &Tensor<T>) {
        self.push(name, DType::F32, t.shape(), f32_bytes(t));
    }

    fn quantized(&mut self, name: String, q: &QuantizedMatrix) {
        self.push(name, DType::Q8, q.shape(), q.to_bytes());
    }

    fn moment<T: Scalar>(&mut self, name: String, m: &Moment<T>) {
        match m {
            Moment::Dense(t) => self.dense(name, t),
            Moment::Quantized(q) => self.quantized(name, q),
        }
    }
}

/// Serializes a checkpoint to bytes. Optimizer moments are stored under
/// `opt.m.<param>`, `opt.v.<param>` and the step counter as `opt.t`.
pub fn to_bytes<T: Scalar>(
    model: &SentenceEncoder<T>,
    vocab: &Vocab,
    kind: CheckpointKind,
    optimizer: Option<&MomentState<T>>,
) -> Result<Vec<u8>> {
    let mut w = Writer {
        tensors: BTreeMap::new(),
        payload: Vec::new(),
    };
    model.visit(&mut |name, slot| match (slot, kind) {
        (Slot::Param(t), CheckpointKind::Full) => w.dense(name, t),
        (Slot::Param(t), CheckpointKind::Adapter) if t.requires_grad => w.dense(name, t),
        (Slot::Weight(FrozenWeight::Dense(t)), CheckpointKind::Full) => w.dense(name, t),
        (Slot::Weight(FrozenWeight::Quantized(q)), CheckpointKind::Full) => w.quantized(name, q),
        _ => {}
    });
    if let Some(state) = optimizer {
        let names: Vec<String> = model.trainable_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries for {} trainable tensors",
                state.len(),
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            w.moment(format!("opt.m.{name}"), &state.m[i]);
            w.moment(format!("opt.v.{name}"), &state.v[i]);
        }
        w.dense("opt.t".into(), &Tensor::<f32>::scalar(state.t as f32));
    }
    let header = Header {
        kind,
        config: model.config().clone(),
        base_quantization: base_quantization(model),
        vocab: vocab.tokens().to_vec(),
        tensors: w.tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + w.payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    Ok(out)
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &SentenceEncoder<T>,
    vocab: &Vocab,
    kind: CheckpointKind,
    optimizer: Option<&MomentState<T>>,
) -> Result<()> {
    fs::write(path, to_bytes(model, vocab, kind, optimizer)?)?;
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Validates the preamble and parses the header; returns it with the payload.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a LACS checkpoint".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32_at(bytes, 8) as usize;
    let body = &bytes[PREAMBLE..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let payload = &body[len..];
    for (name, e) in &header.tensors {
        if e.offset.checked_add(e.length).is_none_or(|end| end > payload.len() as u64) {
            return Err(Error::Checkpoint(format!("tensor {name} extends past end of file")));
        }
    }
    Ok((header, payload))
}

pub fn read_header(path: &Path) -> Result<Header> {
    Ok(parse_header(&fs::read(path)?)?.0)
}

struct Reader<'a> {
    header: &'a Header,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn raw(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.length) as usize]
    }

    fn dense<T: Scalar>(&self, name: &str, expect: (usize, usize)) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let shape = (e.shape[0], e.shape[1]);
        if e.dtype != DType::F32 || shape != expect || e.length as usize != 4 * shape.0 * shape.1 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected f32 {expect:?}, found {:?} {shape:?}",
                e.dtype
            )));
        }
        let data = self
            .raw(e)
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        Tensor::new(shape.0, shape.1, data).map_err(|_| Error::Checkpoint(format!("tensor {name} is not finite")))
    }

    fn quantized(&self, name: &str, expect: (usize, usize)) -> Result<QuantizedMatrix> {
        let e = self.entry(name)?;
        let q = QuantizedMatrix::read_from(&mut Cursor::new(self.raw(e)))?;
        if q.shape() != expect || [q.rows(), q.cols()] != e.shape {
            return Err(Error::Checkpoint(format!("tensor {name}: shape mismatch")));
        }
        Ok(q)
    }

    fn weight<T: Scalar>(&self, name: &str, expect: (usize, usize)) -> Result<FrozenWeight<T>> {
        match self.entry(name)?.dtype {
            DType::F32 => Ok(FrozenWeight::dense(self.dense(name, expect)?)),
            DType::Q8 => Ok(FrozenWeight::Quantized(self.quantized(name, expect)?)),
        }
    }

    fn moment<T: Scalar>(&self, name: &str, expect: (usize, usize)) -> Result<Moment<T>> {
        match self.entry(name)?.dtype {
            DType::F32 => Ok(Moment::Dense(self.dense(name, expect)?)),
            DType::Q8 => Ok(Moment::Quantized(self.quantized(name, expect)?)),
        }
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = parse_header(bytes)?;
    header
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
    let vocab = Vocab::from_tokens(header.vocab.clone())?;
    if vocab.len() > header.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary larger than vocab_size".into()));
    }
    let mut model = SentenceEncoder::<T>::new(header.config.clone())?;
    if header.kind == CheckpointKind::Adapter {
        if let Some(q) = header.base_quantization {
            model.quantize_base(q)?;
        }
    }
    let reader = Reader {
        header: &header,
        payload,
    };
    let mut result = Ok(());
    let mut used = 0usize;
    model.visit_mut(&mut |name, slot| {
        if result.is_err() {
            return;
        }
        let loaded = match slot {
            SlotMut::Param(t) => {
                if header.kind == CheckpointKind::Adapter && !t.requires_grad {
                    return;
                }
                reader.dense::<T>(&name, t.shape()).map(|mut v| {
                    v.requires_grad = t.requires_grad;
                    *t = v;
                })
            }
            SlotMut::Weight(w) => {
                if header.kind == CheckpointKind::Adapter {
                    return;
                }
                reader.weight::<T>(&name, w.shape()).map(|v| *w = v)
            }
        };
        used += 1;
        result = loaded;
    });
    result?;

    let optimizer = if header.tensors.contains_key("opt.t") {
        let params: Vec<(String, (usize, usize))> = model
            .trainable_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, shape) in &params {
            m.push(reader.moment(&format!("opt.m.{name}"), *shape)?);
            v.push(reader.moment(&format!("opt.v.{name}"), *shape)?);
        }
        let t = reader.dense::<f64>("opt.t", (1, 1))?.data()[0];
        let block = m.iter().chain(&v).find_map(|x| match x {
            Moment::Quantized(q) => Some(q.block_size()),
            Moment::Dense(_) => None,
        });
        used += 2 * params.len() + 1;
        Some(MomentState {
            m,
            v,
            t: t as u64,
            state_block_size: block,
        })
    } else {
        None
    };
    if used != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors but the model uses {used}",
            header.tensors.len()
        )));
    }
    Ok(Checkpoint {
        kind: header.kind,
        model,
        vocab,
        optimizer,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}

/// Bytes of all frozen weight matrices as stored now vs as dense `f32`.
pub fn frozen_footprint<T: Scalar>(model: &SentenceEncoder<T>) -> (usize, usize) {
    let (mut stored, mut dense) = (0, 0);
    model.visit(&mut |_, slot| {
        if let Slot::Weight(w) = slot {
            dense += 4 * w.num_params();
            stored += match w {
                FrozenWeight::Dense(t) => 4 * t.len(),
                FrozenWeight::Quantized(q) => q.serialized_size(),
            };
        }
    });
    (stored, dense)
}

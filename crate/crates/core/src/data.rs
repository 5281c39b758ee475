//! NLI / STS corpus loading, entailment filtering, mini-batching and a
//! seeded synthetic paraphrase corpus.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenBatch, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NliRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsRecord {
    pub sentence1: String,
    pub sentence2: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Tsv,
}

impl Format {
    /// `.tsv` means TSV, anything else JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

/// A record type readable from JSONL or three-column TSV.
pub trait Record: Sized + Serialize {
    fn from_columns(cols: &[&str]) -> std::result::Result<Self, String>;
    fn from_json(line: &str) -> std::result::Result<Self, String>;
    fn validate(&self) -> std::result::Result<(), String>;
}

impl Record for NliRecord {
    fn from_columns(cols: &[&str]) -> std::result::Result<Self, String> {
        let label = match cols[2].trim() {
            "entailment" => NliLabel::Entailment,
            "neutral" => NliLabel::Neutral,
            "contradiction" => NliLabel::Contradiction,
            other => return Err(format!("unknown label {other:?}")),
        };
        Ok(Self {
            premise: cols[0].to_string(),
            hypothesis: cols[1].to_string(),
            label,
        })
    }

    fn from_json(line: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.premise.trim().is_empty() || self.hypothesis.trim().is_empty() {
            return Err("empty premise or hypothesis".into());
        }
        Ok(())
    }
}

impl Record for StsRecord {
    fn from_columns(cols: &[&str]) -> std::result::Result<Self, String> {
        let score = cols[2]
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad score {:?}: {e}", cols[2]))?;
        Ok(Self {
            sentence1: cols[0].to_string(),
            sentence2: cols[1].to_string(),
            score,
        })
    }

    fn from_json(line: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=5.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 5]", self.score));
        }
        Ok(())
    }
}

/// Parses records from text. Blank lines are ignored; any malformed row
/// aborts with its 1-based line number.
pub fn parse_records<R: Record>(text: &str, format: Format) -> Result<Vec<R>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::Jsonl => R::from_json(line),
            Format::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    Err(format!("expected 3 tab-separated columns, found {}", cols.len()))
                } else {
                    R::from_columns(&cols)
                }
            }
        };
        let record = parsed
            .and_then(|r| r.validate().map(|()| r))
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_records<R: Record>(path: &Path, format: Format) -> Result<Vec<R>> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{}: not valid UTF-8", path.display())))?;
    parse_records(&text, format).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// A positive pair for contrastive training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub premise: String,
    pub hypothesis: String,
}

/// Keeps entailment records, in order, as (premise, hypothesis) pairs.
pub fn filter_entailment(records: &[NliRecord]) -> Vec<Pair> {
    records
        .iter()
        .filter(|r| r.label == NliLabel::Entailment)
        .map(|r| Pair {
            premise: r.premise.clone(),
            hypothesis: r.hypothesis.clone(),
        })
        .collect()
}

/// Indices into the pair list; row `i` of the premise side is the positive
/// for row `i` of the hypothesis side, every other row a negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub ids: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokenized (premises, hypotheses).
    pub fn tokens(&self, pairs: &[Pair], vocab: &Vocab, max_len: usize) -> (TokenBatch, TokenBatch) {
        let p: Vec<&str> = self.ids.iter().map(|&i| pairs[i].premise.as_str()).collect();
        let h: Vec<&str> = self.ids.iter().map(|&i| pairs[i].hypothesis.as_str()).collect();
        (vocab.batch(&p, max_len), vocab.batch(&h, max_len))
    }
}

/// Seeded shuffle then greedy fill. With `dedup`, a pair whose premise is
/// already in the current batch is deferred to the following batches.
/// Batches of fewer than two pairs (no negatives) are dropped.
pub fn make_batches(pairs: &[Pair], n: usize, seed: u64, dedup: bool) -> Result<Vec<MiniBatch>> {
    if n == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queue: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut ids = Vec::with_capacity(n);
        let mut seen = HashSet::new();
        let mut deferred = Vec::new();
        while ids.len() < n {
            let Some(i) = queue.pop_front() else { break };
            if dedup && !seen.insert(pairs[i].premise.as_str()) {
                deferred.push(i);
            } else {
                ids.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            queue.push_front(i);
        }
        if ids.len() >= 2 {
            batches.push(MiniBatch { ids });
        }
    }
    Ok(batches)
}

/// `|A ∩ B| / |A ∪ B|` over token multisets (min / max of counts).
pub fn multiset_jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    fn count<S: AsRef<str>>(xs: &[S]) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for x in xs {
            *m.entry(x.as_ref()).or_default() += 1;
        }
        m
    }
    let (ca, cb) = (count(a), count(b));
    let keys: HashSet<&str> = ca.keys().chain(cb.keys()).copied().collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (ca.get(k).copied().unwrap_or(0), cb.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub const SYNTH_MIN_LEN: usize = 5;
pub const SYNTH_MAX_LEN: usize = 12;
pub const SYNTH_DROPOUT: f64 = 0.1;
pub const SYNTH_SWAP: f64 = 0.2;
/// Fraction of eval tokens copied from the first sentence, one level per pair.
pub const SYNTH_OVERLAP_LEVELS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Content words of the synthetic language: `vocab_size - 2` of them, so
/// together with `<pad>` and `<unk>` they fill the vocabulary exactly.
pub fn synth_words(vocab_size: usize) -> Vec<String> {
    (0..vocab_size.saturating_sub(2)).map(|i| format!("w{i}")).collect()
}

fn random_sentence(rng: &mut ChaCha8Rng, n_words: usize) -> Vec<usize> {
    let len = rng.random_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
    (0..len).map(|_| rng.random_range(0..n_words)).collect()
}

fn perturb(rng: &mut ChaCha8Rng, tokens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().filter(|_| !rng.random_bool(SYNTH_DROPOUT)).collect();
    if out.is_empty() {
        out.push(tokens[0]);
    }
    for i in 0..out.len().saturating_sub(1) {
        if rng.random_bool(SYNTH_SWAP) {
            out.swap(i, i + 1);
        }
    }
    out
}

fn render(words: &[String], ids: &[usize]) -> String {
    ids.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ")
}

/// Entailment-only paraphrase pairs plus an STS set scored by multiset
/// Jaccard. Train and eval draws come from independent ChaCha streams.
pub fn synth_corpus(
    seed: u64,
    n_train_pairs: usize,
    n_eval_pairs: usize,
    vocab_size: usize,
) -> Result<(Vec<NliRecord>, Vec<StsRecord>)> {
    if vocab_size < 16 {
        return Err(Error::Config(format!("synthetic vocab_size must be >= 16, got {vocab_size}")));
    }
    let words = synth_words(vocab_size);
    let n_words = words.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let train = (0..n_train_pairs)
        .map(|_| {
            let p = random_sentence(&mut rng, n_words);
            let h = perturb(&mut rng, &p);
            NliRecord {
                premise: render(&words, &p),
                hypothesis: render(&words, &h),
                label: NliLabel::Entailment,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let eval = (0..n_eval_pairs)
        .map(|_| {
            let a = random_sentence(&mut rng, n_words);
            let level = SYNTH_OVERLAP_LEVELS[rng.random_range(0..SYNTH_OVERLAP_LEVELS.len())];
            let b: Vec<usize> = a
                .iter()
                .map(|&t| {
                    if rng.random_bool(level) {
                        t
                    } else {
                        rng.random_range(0..n_words)
                    }
                })
                .collect();
            let b = perturb(&mut rng, &b);
            let (sa, sb) = (render(&words, &a), render(&words, &b));
            let ta: Vec<&str> = sa.split(' ').collect();
            let tb: Vec<&str> = sb.split(' ').collect();
            StsRecord {
                score: 5.0 * multiset_jaccard(&ta, &tb),
                sentence1: sa,
                sentence2: sb,
            }
        })
        .collect();
    Ok((train, eval))
}

//! Spearman rank correlation and STS-style evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StsRecord;
use crate::encoder::{SentenceEncoder, Vocab};
use crate::error::{Error, Result};
use crate::objective::{similarity, SimilarityKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LACOS_THREADS";

/// Runs `f` on a pool sized by `LACOS_THREADS` (rayon's default otherwise).
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// 1-based ranks, ties sharing the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho as the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "spearman",
            lhs: (1, x.len()),
            rhs: (1, y.len()),
        });
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("spearman needs at least two finite values per side".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or_else(|| Error::Degenerate("zero rank variance".into()))
}

/// Per-similarity correlations; `None` marks a degenerate entry.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpearmanScores {
    pub cosine: Option<f64>,
    pub manhattan: Option<f64>,
    pub euclidean: Option<f64>,
    pub dot: Option<f64>,
}

impl SpearmanScores {
    pub fn get(&self, kind: SimilarityKind) -> Option<f64> {
        match kind {
            SimilarityKind::Cosine => self.cosine,
            SimilarityKind::NegManhattan => self.manhattan,
            SimilarityKind::NegEuclidean => self.euclidean,
            SimilarityKind::Dot => self.dot,
        }
    }

    fn set(&mut self, kind: SimilarityKind, v: Option<f64>) {
        match kind {
            SimilarityKind::Cosine => self.cosine = v,
            SimilarityKind::NegManhattan => self.manhattan = v,
            SimilarityKind::NegEuclidean => self.euclidean = v,
            SimilarityKind::Dot => self.dot = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spearman: SpearmanScores,
    /// Maximum over non-degenerate entries; absent if all are degenerate.
    pub max: Option<f64>,
    pub n: usize,
    /// Names of the similarity functions whose correlation was undefined.
    pub degenerate: Vec<String>,
}

impl EvalReport {
    pub fn is_degenerate(&self) -> bool {
        self.max.is_none()
    }

    /// Builds a report from per-similarity score lists against `gold`.
    pub fn from_scores(gold: &[f64], scores: &[(SimilarityKind, Vec<f64>)]) -> Result<Self> {
        let mut spearman_scores = SpearmanScores::default();
        let mut degenerate = Vec::new();
        for (kind, s) in scores {
            let rho = match spearman(s, gold) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            if rho.is_none() {
                degenerate.push(kind.name().to_string());
            }
            spearman_scores.set(*kind, rho);
        }
        let max = scores
            .iter()
            .filter_map(|(k, _)| spearman_scores.get(*k))
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
        Ok(Self {
            spearman: spearman_scores,
            max,
            n: gold.len(),
            degenerate,
        })
    }
}

/// Embeds `texts` in fixed-size chunks, in parallel, preserving order.
pub fn embed_texts<T: Scalar, S: AsRef<str> + Sync>(
    model: &SentenceEncoder<T>,
    vocab: &Vocab,
    texts: &[S],
) -> Result<Tensor<T>> {
    const CHUNK: usize = 64;
    let max_len = model.config().max_seq_len;
    let chunks: Vec<Tensor<T>> = with_thread_pool(|| {
        texts
            .par_chunks(CHUNK)
            .map(|c| model.embed(&vocab.batch(c, max_len)))
            .collect::<Result<Vec<_>>>()
    })?;
    let d = model.embedding_dim();
    let mut data = Vec::with_capacity(texts.len() * d);
    for c in chunks {
        data.extend(c.into_data());
    }
    Tensor::new_unchecked(texts.len(), d, data)
}

/// Scores every pair under the four similarity functions and correlates
/// each with the gold scores.
pub fn sts_eval<T: Scalar>(model: &SentenceEncoder<T>, vocab: &Vocab, records: &[StsRecord]) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(Error::Data(format!("evaluation needs at least 2 records, got {}", records.len())));
    }
    let s1: Vec<&str> = records.iter().map(|r| r.sentence1.as_str()).collect();
    let s2: Vec<&str> = records.iter().map(|r| r.sentence2.as_str()).collect();
    let (u, v) = (embed_texts(model, vocab, &s1)?, embed_texts(model, vocab, &s2)?);
    let gold: Vec<f64> = records.iter().map(|r| r.score).collect();
    let scores = SimilarityKind::ALL
        .iter()
        .map(|&kind| {
            let s = (0..records.len())
                .map(|i| similarity(u.row(i), v.row(i), kind).map(|x| x.as_f64()))
                .collect::<Result<Vec<f64>>>()?;
            Ok((kind, s))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(&gold, &scores)
}

/// Min-max scaling to `[0, 1]`.
pub fn standardize_losses(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.len() < 2 {
        return Err(Error::Degenerate("standardization needs at least two values".into()));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("loss values".into()));
    }
    if hi == lo {
        return Err(Error::Degenerate("all losses equal".into()));
    }
    Ok(losses.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

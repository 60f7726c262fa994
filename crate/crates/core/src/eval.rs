//! Embedding quality measures over exported input vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::sampler::SeededDraw;
use crate::store::read_text_vectors;

/// Tokens with one dense vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    values: Vec<f32>,
    norms: Vec<f64>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl EmbeddingSet {
    pub fn new(words: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != words.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} words of dimension {dim}",
                values.len(),
                words.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {w:?}")));
            }
        }
        let norms = values
            .chunks_exact(dim.max(1))
            .take(words.len())
            .map(norm)
            .collect();
        Ok(EmbeddingSet {
            words,
            index,
            dim,
            values,
            norms,
        })
    }

    /// Input vectors of a trained store, in vocabulary order.
    pub fn from_vocabulary(vocab: &Vocabulary, dim: usize, input: &[f32]) -> Result<Self> {
        let words = vocab.entries().iter().map(|e| e.word.clone()).collect();
        Self::new(words, dim, input.to_vec())
    }

    /// Reads the text vector format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (words, dim, values) = read_text_vectors(BufReader::new(File::open(path)?))?;
        Self::new(words, dim, values)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index_of(token).map(|i| self.vector(i))
    }

    /// Appends a token. Used to plant synthetic test words.
    pub fn push(&mut self, token: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of length {} in a {}-dim set",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(token) {
            return Err(Error::Config(format!("duplicate token {token:?}")));
        }
        self.index.insert(token.to_string(), self.words.len());
        self.words.push(token.to_string());
        self.values.extend_from_slice(vector);
        self.norms.push(norm(vector));
        Ok(())
    }

    /// Cosine similarity of two tokens.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let ia = self
            .index_of(a)
            .ok_or_else(|| Error::UnknownToken(a.into()))?;
        let ib = self
            .index_of(b)
            .ok_or_else(|| Error::UnknownToken(b.into()))?;
        self.similarity_at(ia, ib)
    }

    fn similarity_at(&self, a: usize, b: usize) -> Result<f64> {
        let (na, nb) = (self.norms[a], self.norms[b]);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok((dot(self.vector(a), self.vector(b)) / (na * nb)).clamp(-1.0, 1.0))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity, accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Token(&'a str),
    Vector(&'a [f32]),
}

/// The `k` most similar tokens, by descending cosine then token order.
/// A token query is excluded from its own results; zero vectors in the set
/// are skipped. With `threshold`, only scores `>= threshold` are kept.
pub fn top_k(
    set: &EmbeddingSet,
    query: Query<'_>,
    k: usize,
    threshold: Option<f64>,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (q, skip) = match query {
        Query::Token(t) => {
            let i = set
                .index_of(t)
                .ok_or_else(|| Error::UnknownToken(t.into()))?;
            (set.vector(i), Some(i))
        }
        Query::Vector(v) => {
            if v.len() != set.dim() {
                return Err(Error::Shape(format!(
                    "query of length {} in a {}-dim set",
                    v.len(),
                    set.dim()
                )));
            }
            (v, None)
        }
    };
    let qn = norm(q);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut scored: Vec<(usize, f64)> = (0..set.len())
        .filter(|&i| Some(i) != skip && set.norms[i] > 0.0)
        .map(|i| {
            (
                i,
                (dot(q, set.vector(i)) / (qn * set.norms[i])).clamp(-1.0, 1.0),
            )
        })
        .filter(|&(_, s)| threshold.is_none_or(|t| s >= t))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| set.words[a.0].cmp(&set.words[b.0]))
    });
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (set.words[i].clone(), s))
        .collect())
}

/// Human similarity scores for word pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityJudgments {
    pub pairs: Vec<(String, String, f64)>,
}

impl SimilarityJudgments {
    /// Parses `word<TAB>word<TAB>score` lines (commas are accepted as
    /// separators too). Blank lines, `#` comments and a first line whose
    /// score is not a number are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen_data = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else if line.contains(',') {
                line.split(',').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            let parsed = match fields.as_slice() {
                [a, b, score, ..] => score
                    .parse::<f64>()
                    .ok()
                    .map(|s| (a.to_string(), b.to_string(), s)),
                _ => None,
            };
            match parsed {
                Some(p) if p.2.is_finite() => {
                    pairs.push(p);
                    seen_data = true;
                }
                None if !seen_data => continue,
                _ => {
                    return Err(Error::parse(
                        i + 1,
                        format!("expected word, word, score: {line:?}"),
                    ))
                }
            }
        }
        Ok(SimilarityJudgments { pairs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation of two score sequences.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} and {} scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::TooFewPairs(a.len()));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// Correlation between model cosines and human scores over pairs whose
/// tokens are both present (and have nonzero vectors).
pub fn spearman(set: &EmbeddingSet, judgments: &SimilarityJudgments) -> Result<SpearmanResult> {
    let mut model = Vec::new();
    let mut human = Vec::new();
    for (a, b, score) in &judgments.pairs {
        if let Ok(c) = set.similarity(a, b) {
            model.push(c);
            human.push(*score);
        }
    }
    let rho = spearman_rho(&model, &human)?;
    Ok(SpearmanResult {
        rho,
        pairs_used: model.len(),
        pairs_skipped: judgments.pairs.len() - model.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogyResult {
    /// `None` when no question had all four tokens in the vocabulary.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub questions_used: usize,
    pub questions_skipped: usize,
}

/// Parses analogy questions: four whitespace-separated tokens per line;
/// lines starting with `:` are section headers.
pub fn parse_analogies(text: &str) -> Result<Vec<[String; 4]>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(':') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let [a, b, c, d] = t.as_slice() else {
            return Err(Error::parse(
                i + 1,
                format!("expected 4 tokens, got {}", t.len()),
            ));
        };
        out.push([a.to_string(), b.to_string(), c.to_string(), d.to_string()]);
    }
    Ok(out)
}

/// For each `a : b :: c : d`, checks that the nearest token to
/// `b - a + c` over the full set, excluding `a`, `b` and `c`, is `d`.
/// Vectors are unit-normalized before combining.
pub fn analogy_accuracy(set: &EmbeddingSet, questions: &[[String; 4]]) -> AnalogyResult {
    let d = set.dim();
    let unit: Vec<f32> = (0..set.len())
        .flat_map(|i| {
            let n = set.norms[i];
            set.vector(i)
                .iter()
                .map(move |&x| if n > 0.0 { (x as f64 / n) as f32 } else { 0.0 })
        })
        .collect();
    let row = |i: usize| &unit[i * d..(i + 1) * d];
    let mut correct = 0;
    let mut used = 0;
    for q in questions {
        let idx: Option<Vec<usize>> = q.iter().map(|t| set.index_of(t)).collect();
        let Some(idx) = idx else { continue };
        if idx[..3].iter().any(|&i| set.norms[i] == 0.0) {
            continue;
        }
        used += 1;
        let target: Vec<f64> = (0..d)
            .map(|c| row(idx[1])[c] as f64 - row(idx[0])[c] as f64 + row(idx[2])[c] as f64)
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for i in 0..set.len() {
            if idx[..3].contains(&i) || set.norms[i] == 0.0 {
                continue;
            }
            let s: f64 = row(i)
                .iter()
                .zip(&target)
                .map(|(&x, &y)| x as f64 * y)
                .sum();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if best.map(|b| b.0) == Some(idx[3]) {
            correct += 1;
        }
    }
    AnalogyResult {
        accuracy: (used > 0).then(|| correct as f64 / used as f64),
        correct,
        questions_used: used,
        questions_skipped: questions.len() - used,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pairs: usize,
    /// Upper edges of the histogram bins over `|cos_a - cos_b|`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fraction_below_006: f64,
    pub fraction_below_01: f64,
    pub mean_abs_diff: f64,
}

/// Draws `count` distinct-token pairs present in both sets, uniformly with
/// replacement from the shared tokens of `a`.
pub fn sample_pairs(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    count: usize,
    seed: u64,
) -> Vec<(String, String)> {
    let shared: Vec<&String> = a
        .words()
        .iter()
        .filter(|w| {
            b.index_of(w).is_some()
                && a.get(w).is_some_and(|v| norm(v) > 0.0)
                && b.get(w).is_some_and(|v| norm(v) > 0.0)
        })
        .collect();
    if shared.len() < 2 {
        return Vec::new();
    }
    let mut draw = SeededDraw::new(seed);
    let n = shared.len() as u64;
    (0..count)
        .map(|_| {
            let i = draw.next_below(n) as usize;
            let mut j = draw.next_below(n - 1) as usize;
            if j >= i {
                j += 1;
            }
            (shared[i].clone(), shared[j].clone())
        })
        .collect()
}

/// Histogram of cosine disagreement between two embeddings of the same
/// vocabulary. Pairs missing from either set are ignored.
pub fn agreement_report(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    pairs: &[(String, String)],
) -> AgreementReport {
    let edges: Vec<f64> = vec![0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3, 0.5, 2.0];
    let mut counts = vec![0; edges.len()];
    let mut diffs = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        let (Ok(ca), Ok(cb)) = (a.similarity(x, y), b.similarity(x, y)) else {
            continue;
        };
        let diff = (ca - cb).abs();
        let bin = edges
            .iter()
            .position(|&e| diff < e)
            .unwrap_or(edges.len() - 1);
        counts[bin] += 1;
        diffs.push(diff);
    }
    let n = diffs.len();
    let frac = |t: f64| {
        if n == 0 {
            0.0
        } else {
            diffs.iter().filter(|&&d| d < t).count() as f64 / n as f64
        }
    };
    AgreementReport {
        pairs: n,
        bin_edges: edges,
        counts,
        fraction_below_006: frac(0.06),
        fraction_below_01: frac(0.1),
        mean_abs_diff: if n == 0 {
            0.0
        } else {
            diffs.iter().sum::<f64>() / n as f64
        },
    }
}

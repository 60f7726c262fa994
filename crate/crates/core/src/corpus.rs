//! Vocabulary construction, corpus indexing, subsampling and minibatch
//! formation.
//!
//! Tokens are whitespace separated; each input line is one sentence.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::{derive_seed, SeededDraw};

/// Sentence delimiter in the binary indexed-corpus format.
pub const SENTENCE_SENTINEL: u32 = u32::MAX;
pub const INDEXED_MAGIC: &[u8; 8] = b"W2VIDX1\0";

const SUBSAMPLE_STREAM: u64 = 0x5355_4253; // "SUBS"
const WINDOW_STREAM: u64 = 0x5749_4e44; // "WIND"

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub word: String,
    pub count: u64,
}

/// Frequency-ordered vocabulary. Index `i` is the `i`-th most frequent word.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, u32>,
    total: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from `(word, count)` pairs in any order.
    ///
    /// Sorts by descending count, breaking ties by byte-wise token order.
    pub fn from_counts<I>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        let mut entries: Vec<VocabEntry> = counts
            .into_iter()
            .map(|(word, count)| VocabEntry { word, count })
            .collect();
        if entries.iter().any(|e| e.count == 0) {
            return Err(Error::Config("vocabulary counts must be positive".into()));
        }
        entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
        if entries.len() > u32::MAX as usize - 1 {
            return Err(Error::Config(
                "vocabulary exceeds 32-bit index space".into(),
            ));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.word.clone(), i as u32).is_some() {
                return Err(Error::Config(format!(
                    "duplicate vocabulary word {:?}",
                    e.word
                )));
            }
        }
        let total = entries.iter().map(|e| e.count).sum();
        Ok(Vocabulary {
            entries,
            index,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn index_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: u32) -> &str {
        &self.entries[index as usize].word
    }

    pub fn count(&self, index: u32) -> u64 {
        self.entries[index as usize].count
    }

    /// Sum of all counts: the number of in-vocabulary corpus tokens.
    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}", e.word, e.count)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut counts = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(n + 1, "expected word<TAB>count"))?;
            let count = count
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::parse(n + 1, e.to_string()))?;
            counts.push((word.to_string(), count));
        }
        Self::from_counts(counts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_tsv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_tsv(BufReader::new(File::open(path)?))
    }
}

/// Streaming token counter.
#[derive(Debug, Default, Clone)]
pub struct VocabularyBuilder {
    counts: HashMap<String, u64>,
}

impl VocabularyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sentence(&mut self, line: &str) {
        for token in line.split_whitespace() {
            match self.counts.get_mut(token) {
                Some(c) => *c += 1,
                None => {
                    self.counts.insert(token.to_string(), 1);
                }
            }
        }
    }

    pub fn add_reader<R: BufRead>(&mut self, input: R) -> io::Result<()> {
        for line in input.lines() {
            self.add_sentence(&line?);
        }
        Ok(())
    }

    /// Keeps words seen at least `min_count` times, then the `max_vocab`
    /// most frequent of those.
    pub fn build(self, min_count: u64, max_vocab: Option<usize>) -> Result<Vocabulary> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let kept = self.counts.into_iter().filter(|(_, c)| *c >= min_count);
        let mut vocab = Vocabulary::from_counts(kept)?;
        if vocab.is_empty() {
            return Err(Error::EmptyVocabulary { min_count });
        }
        if let Some(max) = max_vocab {
            if max == 0 {
                return Err(Error::Config("max_vocab must be positive".into()));
            }
            if vocab.len() > max {
                let entries = vocab.entries[..max].to_vec();
                vocab = Vocabulary::from_counts(entries.into_iter().map(|e| (e.word, e.count)))?;
            }
        }
        Ok(vocab)
    }
}

/// Counts whitespace tokens in `text` (one sentence per line).
pub fn build_vocabulary(
    text: &str,
    min_count: u64,
    max_vocab: Option<usize>,
) -> Result<Vocabulary> {
    let mut builder = VocabularyBuilder::new();
    for line in text.lines() {
        builder.add_sentence(line);
    }
    builder.build(min_count, max_vocab)
}

/// Corpus as sentences of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexedCorpus {
    pub sentences: Vec<Vec<u32>>,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PreprocessStats {
    pub retained_tokens: u64,
    pub dropped_tokens: u64,
    pub dropped_sentences: u64,
}

impl IndexedCorpus {
    pub fn from_sentences(sentences: Vec<Vec<u32>>) -> Self {
        let sentences: Vec<Vec<u32>> = sentences.into_iter().filter(|s| !s.is_empty()).collect();
        let total_tokens = sentences.iter().map(|s| s.len() as u64).sum();
        IndexedCorpus {
            sentences,
            total_tokens,
        }
    }

    /// Tokens in sentences long enough to yield at least one training pair.
    pub fn trainable_tokens(&self) -> u64 {
        self.sentences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| s.len() as u64)
            .sum()
    }

    /// Splits into `parts` contiguous runs of sentences with roughly equal
    /// token counts. Always returns exactly `parts` corpora (some may be empty).
    pub fn partition(&self, parts: usize) -> Vec<IndexedCorpus> {
        let parts = parts.max(1);
        let mut out: Vec<Vec<Vec<u32>>> = vec![Vec::new(); parts];
        let mut seen = 0u64;
        let total = self.total_tokens.max(1);
        for s in &self.sentences {
            let slot = ((seen * parts as u64) / total).min(parts as u64 - 1) as usize;
            out[slot].push(s.clone());
            seen += s.len() as u64;
        }
        out.into_iter().map(IndexedCorpus::from_sentences).collect()
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(INDEXED_MAGIC)?;
        out.write_all(&self.total_tokens.to_le_bytes())?;
        for s in &self.sentences {
            for &w in s {
                out.write_all(&w.to_le_bytes())?;
            }
            out.write_all(&SENTENCE_SENTINEL.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != INDEXED_MAGIC {
            return Err(Error::Parse {
                line: 0,
                message: "not an indexed corpus (bad magic)".into(),
            });
        }
        let mut buf8 = [0u8; 8];
        input.read_exact(&mut buf8)?;
        let declared = u64::from_le_bytes(buf8);
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if rest.len() % 4 != 0 {
            return Err(Error::parse(
                0,
                "indexed corpus body is not a multiple of 4 bytes",
            ));
        }
        let mut sentences = Vec::new();
        let mut current = Vec::new();
        for chunk in rest.chunks_exact(4) {
            let w = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if w == SENTENCE_SENTINEL {
                sentences.push(std::mem::take(&mut current));
            } else {
                current.push(w);
            }
        }
        if !current.is_empty() {
            return Err(Error::parse(
                0,
                "indexed corpus ends without a sentence delimiter",
            ));
        }
        let corpus = IndexedCorpus::from_sentences(sentences);
        if corpus.total_tokens != declared {
            return Err(Error::parse(
                0,
                format!(
                    "header declares {declared} tokens, body has {}",
                    corpus.total_tokens
                ),
            ));
        }
        Ok(corpus)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_binary(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(BufReader::new(File::open(path)?))
    }

    /// Checks every index against the vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for s in &self.sentences {
            if let Some(&w) = s.iter().find(|&&w| w as usize >= vocab_size) {
                return Err(Error::IndexOutOfRange {
                    index: w,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Maps one sentence to indices, dropping out-of-vocabulary tokens.
pub fn index_sentence(line: &str, vocab: &Vocabulary, stats: &mut PreprocessStats) -> Vec<u32> {
    let mut out = Vec::new();
    for token in line.split_whitespace() {
        match vocab.index_of(token) {
            Some(i) => out.push(i),
            None => stats.dropped_tokens += 1,
        }
    }
    stats.retained_tokens += out.len() as u64;
    if out.is_empty() {
        stats.dropped_sentences += 1;
    }
    out
}

pub fn preprocess_reader<R: BufRead>(
    input: R,
    vocab: &Vocabulary,
) -> Result<(IndexedCorpus, PreprocessStats)> {
    let mut stats = PreprocessStats::default();
    let mut sentences = Vec::new();
    for line in input.lines() {
        let s = index_sentence(&line?, vocab, &mut stats);
        if !s.is_empty() {
            sentences.push(s);
        }
    }
    Ok((IndexedCorpus::from_sentences(sentences), stats))
}

pub fn preprocess(text: &str, vocab: &Vocabulary) -> (IndexedCorpus, PreprocessStats) {
    preprocess_reader(text.as_bytes(), vocab).expect("reading from memory cannot fail")
}

/// Window and subsampling parameters for one pass over a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    /// Maximum one-sided window `B`.
    pub max_window: u32,
    /// Subsampling threshold `t`; zero disables subsampling.
    pub subsample_threshold: f64,
    pub rng_seed: u64,
    /// Draw each position's window uniformly from `1..=B`. When false every
    /// position uses exactly `B`.
    pub dynamic: bool,
}

impl WindowSpec {
    pub fn new(max_window: u32, subsample_threshold: f64, rng_seed: u64) -> Self {
        WindowSpec {
            max_window,
            subsample_threshold,
            rng_seed,
            dynamic: true,
        }
    }

    pub fn fixed(mut self) -> Self {
        self.dynamic = false;
        self
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }
}

/// Keep probability `min(1, (sqrt(f/t) + 1) * t / f)` with `f = count / total`.
pub fn keep_probability(count: u64, total: u64, threshold: f64) -> f64 {
    if threshold <= 0.0 || count == 0 || total == 0 {
        return 1.0;
    }
    let f = count as f64 / total as f64;
    ((f / threshold).sqrt() + 1.0) * threshold / f
}

/// Randomly drops occurrences of frequent words.
///
/// Sentences emptied by the drop are removed. `t = 0` returns the input.
pub fn subsample(corpus: &IndexedCorpus, vocab: &Vocabulary, spec: &WindowSpec) -> IndexedCorpus {
    if spec.subsample_threshold <= 0.0 {
        return corpus.clone();
    }
    let total = vocab.total_count();
    let keep: Vec<f64> = vocab
        .entries()
        .iter()
        .map(|e| keep_probability(e.count, total, spec.subsample_threshold))
        .collect();
    let mut draw = SeededDraw::new(derive_seed(&[spec.rng_seed, SUBSAMPLE_STREAM]));
    let sentences = corpus
        .sentences
        .iter()
        .map(|s| {
            s.iter()
                .copied()
                .filter(|&w| {
                    let p = keep[w as usize];
                    p >= 1.0 || draw.next_f64() < p
                })
                .collect::<Vec<u32>>()
        })
        .collect();
    IndexedCorpus::from_sentences(sentences)
}

/// One minibatch: input words and, for each, its context words.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Minibatch {
    pub inputs: Vec<u32>,
    pub outputs: Vec<Vec<u32>>,
    pub batch_id: u64,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of (input, context) pairs.
    pub fn pairs(&self) -> usize {
        self.outputs.iter().map(Vec::len).sum()
    }

    /// Pairs in row-major order: all contexts of input 0, then input 1, ...
    pub fn iter_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.inputs
            .iter()
            .zip(&self.outputs)
            .flat_map(|(&i, ctx)| ctx.iter().map(move |&o| (i, o)))
    }
}

/// Lazily forms minibatches over a corpus.
///
/// Window sizes are drawn from a generator seeded by `spec.rng_seed`, in the
/// order positions are emitted.
pub struct MinibatchIter<'a> {
    corpus: &'a IndexedCorpus,
    max_window: u32,
    dynamic: bool,
    draw: SeededDraw,
    batch_size: usize,
    interleaved: bool,
    next_sentence: usize,
    // Sequential cursor.
    position: usize,
    // Interleaved round-robin pool of (sentence, next position).
    pool: VecDeque<(usize, usize)>,
    next_batch_id: u64,
}

impl<'a> MinibatchIter<'a> {
    pub fn new(
        corpus: &'a IndexedCorpus,
        spec: &WindowSpec,
        batch_size: usize,
        interleaved: bool,
    ) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        assert!(spec.max_window >= 1, "window must be positive");
        MinibatchIter {
            corpus,
            max_window: spec.max_window,
            dynamic: spec.dynamic,
            draw: SeededDraw::new(derive_seed(&[spec.rng_seed, WINDOW_STREAM])),
            batch_size,
            interleaved,
            next_sentence: 0,
            position: 0,
            pool: VecDeque::with_capacity(batch_size),
            next_batch_id: 0,
        }
    }

    fn advance_to_trainable(&mut self) -> Option<usize> {
        while let Some(s) = self.corpus.sentences.get(self.next_sentence) {
            if s.len() >= 2 {
                return Some(self.next_sentence);
            }
            self.next_sentence += 1;
        }
        None
    }

    fn next_sequential(&mut self) -> Option<(usize, usize)> {
        let s = self.advance_to_trainable()?;
        let pos = self.position;
        self.position += 1;
        if self.position == self.corpus.sentences[s].len() {
            self.position = 0;
            self.next_sentence += 1;
        }
        Some((s, pos))
    }

    fn refill_pool(&mut self) {
        while self.pool.len() < self.batch_size {
            match self.advance_to_trainable() {
                Some(s) => {
                    self.pool.push_back((s, 0));
                    self.next_sentence += 1;
                }
                None => break,
            }
        }
    }

    fn next_interleaved(&mut self) -> Option<(usize, usize)> {
        self.refill_pool();
        let (s, pos) = self.pool.pop_front()?;
        if pos + 1 < self.corpus.sentences[s].len() {
            self.pool.push_back((s, pos + 1));
        } else {
            self.refill_pool();
        }
        Some((s, pos))
    }

    fn contexts(&mut self, s: usize, pos: usize) -> Vec<u32> {
        let sentence = &self.corpus.sentences[s];
        let b = if self.dynamic {
            1 + self.draw.next_below(self.max_window as u64) as usize
        } else {
            self.max_window as usize
        };
        let lo = pos.saturating_sub(b);
        let hi = (pos + b + 1).min(sentence.len());
        let mut ctx = Vec::with_capacity(hi - lo - 1);
        ctx.extend_from_slice(&sentence[lo..pos]);
        ctx.extend_from_slice(&sentence[pos + 1..hi]);
        ctx
    }
}

impl Iterator for MinibatchIter<'_> {
    type Item = Minibatch;

    fn next(&mut self) -> Option<Minibatch> {
        let mut batch = Minibatch {
            inputs: Vec::with_capacity(self.batch_size),
            outputs: Vec::with_capacity(self.batch_size),
            batch_id: self.next_batch_id,
        };
        while batch.inputs.len() < self.batch_size {
            let next = if self.interleaved {
                self.next_interleaved()
            } else {
                self.next_sequential()
            };
            let Some((s, pos)) = next else { break };
            let ctx = self.contexts(s, pos);
            batch.inputs.push(self.corpus.sentences[s][pos]);
            batch.outputs.push(ctx);
        }
        if batch.inputs.is_empty() {
            None
        } else {
            self.next_batch_id += 1;
            Some(batch)
        }
    }
}

pub fn make_minibatches(
    corpus: &IndexedCorpus,
    spec: &WindowSpec,
    batch_size: usize,
    interleaved: bool,
) -> Vec<Minibatch> {
    MinibatchIter::new(corpus, spec, batch_size, interleaved).collect()
}

#![allow(dead_code)]

use std::sync::Arc;

use gridvec_core::corpus::{build_vocabulary, preprocess};
use gridvec_core::transport::BandwidthMeter;
use gridvec_core::{
    IndexedCorpus, NoiseTable, SeededDraw, Shard, ShardLayout, ShardSet, Vocabulary,
};

/// Text of roughly `tokens` tokens over `vocab` words: sentences of 5 to 24
/// words, each drawing half its tokens from one of `topics` topic lists and
/// half from a Zipf-like background.
pub fn synthetic_text(tokens: usize, vocab: usize, topics: usize, seed: u64) -> String {
    let mut d = SeededDraw::new(seed);
    let weights: Vec<f64> = (0..vocab).map(|i| 1.0 / (i as f64 + 2.0)).collect();
    let total: f64 = weights.iter().sum();
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let mut out = String::new();
    let mut emitted = 0;
    while emitted < tokens {
        let topic = d.next_below(topics as u64) as usize;
        let len = 5 + d.next_below(20) as usize;
        for j in 0..len {
            let w = if d.next_f64() < 0.5 {
                // Topic words: a contiguous block of ids per topic.
                let block = vocab / topics;
                topic * block + d.next_below(block as u64) as usize
            } else {
                let u = d.next_f64();
                cdf.partition_point(|&c| c < u).min(vocab - 1)
            };
            if j > 0 {
                out.push(' ');
            }
            out.push('w');
            out.push_str(&w.to_string());
        }
        out.push('\n');
        emitted += len;
    }
    out
}

pub fn synthetic_corpus(tokens: usize, seed: u64) -> (Vocabulary, IndexedCorpus) {
    let text = synthetic_text(tokens, 1000, 20, seed);
    let vocab = build_vocabulary(&text, 1, None).unwrap();
    let (corpus, _) = preprocess(&text, &vocab);
    (vocab, corpus)
}

pub fn local_shards(vocab: &Vocabulary, dim: usize, shards: usize, seed: u64) -> Vec<Arc<Shard>> {
    let noise = Arc::new(NoiseTable::from_vocabulary(vocab));
    let layout = ShardLayout::new(dim, shards).unwrap();
    (0..shards)
        .map(|s| Arc::new(Shard::init(s, &layout, Arc::clone(&noise), seed).unwrap()))
        .collect()
}

pub fn local_set(
    vocab: &Vocabulary,
    dim: usize,
    shards: usize,
    seed: u64,
    meter: BandwidthMeter,
) -> ShardSet {
    ShardSet::local(&local_shards(vocab, dim, shards, seed), Arc::new(meter)).unwrap()
}

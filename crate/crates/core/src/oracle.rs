//! Sequential single-process reference trainer.
//!
//! Updates are deferred to the end of each minibatch exactly as a shard's
//! adjust call defers them, and every floating-point operation happens in
//! the same order as on a single shard, so a one-shard, one-thread,
//! batch-size-one distributed run reproduces this trainer bit for bit.

use std::collections::BTreeMap;

use crate::client::{coefficients, epoch_spec, step_seed, LearningRate, TrainConfig, TrainStats};
use crate::corpus::{subsample, IndexedCorpus, Minibatch, MinibatchIter, Vocabulary};
use crate::error::{Error, Result};
use crate::sampler::{NoiseTable, SeededDraw};
use crate::shard::PartialDotResult;
use crate::store::{FullVectorStore, Matrix};

/// Negatives a shard draws for `batch` under `seed`, `negatives` per pair
/// in row-major pair order.
pub fn step_negatives(
    noise: &NoiseTable,
    batch: &Minibatch,
    negatives: u32,
    seed: u64,
) -> Vec<u32> {
    let mut draw = SeededDraw::new(seed);
    let mut out = Vec::with_capacity(batch.pairs() * negatives as usize);
    for (_, w_out) in batch.iter_pairs() {
        noise.fill_negatives(&mut draw, w_out, negatives as usize, &mut out);
    }
    out
}

fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for c in 0..a.len() {
        acc += a[c] as f64 * b[c] as f64;
    }
    acc as f32
}

fn accumulate(deltas: &mut BTreeMap<u32, Vec<f32>>, word: u32, g: f32, x: &[f32]) {
    let d = deltas.entry(word).or_insert_with(|| vec![0.0; x.len()]);
    for c in 0..x.len() {
        d[c] += g * x[c];
    }
}

/// One SGD step on a minibatch. Returns the number of pairs trained.
pub fn oracle_step(
    store: &mut FullVectorStore,
    noise: &NoiseTable,
    batch: &Minibatch,
    negatives: u32,
    alpha: f64,
    seed: u64,
) -> Result<usize> {
    for &w in batch.inputs.iter().chain(batch.outputs.iter().flatten()) {
        if w as usize >= store.vocab_size {
            return Err(Error::IndexOutOfRange {
                index: w,
                vocab_size: store.vocab_size,
            });
        }
    }
    let n = negatives as usize;
    let negs = step_negatives(noise, batch, negatives, seed);
    let pairs: Vec<(u32, u32)> = batch.iter_pairs().collect();

    let mut f = PartialDotResult::default();
    for (p, &(w_in, w_out)) in pairs.iter().enumerate() {
        let u = store.row(Matrix::Input, w_in);
        f.f_plus.push(dot32(u, store.row(Matrix::Output, w_out)));
        for &k in &negs[p * n..(p + 1) * n] {
            f.f_minus.push(dot32(u, store.row(Matrix::Output, k)));
        }
    }
    let g = coefficients(&f, alpha);

    let mut du = BTreeMap::new();
    let mut dv = BTreeMap::new();
    for (p, &(w_in, w_out)) in pairs.iter().enumerate() {
        let u = store.row(Matrix::Input, w_in);
        accumulate(&mut du, w_in, g.g_plus[p], store.row(Matrix::Output, w_out));
        accumulate(&mut dv, w_out, g.g_plus[p], u);
        for (j, &k) in negs[p * n..(p + 1) * n].iter().enumerate() {
            let gm = g.g_minus[p * n + j];
            accumulate(&mut du, w_in, gm, store.row(Matrix::Output, k));
            accumulate(&mut dv, k, gm, u);
        }
    }
    for (matrix, deltas) in [(Matrix::Input, du), (Matrix::Output, dv)] {
        for (w, d) in deltas {
            let row = store.row_mut(matrix, w);
            for c in 0..d.len() {
                row[c] += d[c];
            }
        }
    }
    Ok(pairs.len())
}

/// Trains from the shared initialization with the distributed trainer's
/// seeds and schedule, as a single client over the whole corpus.
pub fn oracle_train(
    corpus: &IndexedCorpus,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<(FullVectorStore, TrainStats)> {
    config.validate()?;
    corpus.validate(vocab.len())?;
    let noise = NoiseTable::from_vocabulary(vocab);
    let mut store = FullVectorStore::new(vocab.len(), config.dim, config.seed);
    let rate = LearningRate::from_config(config);
    let mut stats = TrainStats {
        epochs: config.epochs,
        threads: 1,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    for epoch in 0..config.epochs {
        let spec = epoch_spec(config, epoch, 0);
        let sub = subsample(corpus, vocab, &spec);
        let epoch_total = sub.trainable_tokens();
        let mut done = 0u64;
        for batch in MinibatchIter::new(&sub, &spec, config.batch_size, config.interleaved) {
            let alpha = rate.at(epoch, done, epoch_total);
            let seed = step_seed(config.seed, epoch, 0, batch.batch_id);
            let pairs =
                oracle_step(&mut store, &noise, &batch, config.negatives, alpha, seed)? as u64;
            stats.steps += 1;
            stats.inputs += batch.len() as u64;
            stats.pairs += pairs;
            stats.negatives += pairs * config.negatives as u64;
            stats.final_alpha = alpha;
            done += batch.len() as u64;
        }
    }
    stats.elapsed_secs = start.elapsed().as_secs_f64();
    Ok((store, stats))
}

/// Dense f64 state for gradient checks: `u` and `v` are `vocab x dim`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub dim: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DenseState {
    fn u(&self, w: u32) -> &[f64] {
        &self.u[w as usize * self.dim..(w as usize + 1) * self.dim]
    }

    fn v(&self, w: u32) -> &[f64] {
        &self.v[w as usize * self.dim..(w as usize + 1) * self.dim]
    }
}

/// Analytic gradient of the restricted objective of one minibatch with
/// fixed negatives (`negatives.len() / pairs.len()` per pair).
///
/// For a pair `(I, O)` with `s = sigma(u_I.v_O)`, `u_I` gains `(1-s) v_O`
/// and `v_O` gains `(1-s) u_I`; a negative `k` with `t = sigma(u_I.v_k)`
/// contributes `-t v_k` to `u_I` and `-t u_I` to `v_k`.
pub fn lambda_gradient(
    state: &DenseState,
    pairs: &[(u32, u32)],
    negatives: &[u32],
) -> (Vec<f64>, Vec<f64>) {
    let d = state.dim;
    let n = if pairs.is_empty() {
        0
    } else {
        negatives.len() / pairs.len()
    };
    let mut gu = vec![0.0; state.u.len()];
    let mut gv = vec![0.0; state.v.len()];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for (p, &(i, o)) in pairs.iter().enumerate() {
        let u = state.u(i);
        let mut terms = vec![(o, 1.0 - crate::client::sigmoid(dot(u, state.v(o))))];
        for &k in &negatives[p * n..(p + 1) * n] {
            terms.push((k, -crate::client::sigmoid(dot(u, state.v(k)))));
        }
        for (w, coef) in terms {
            let v = state.v(w);
            for c in 0..d {
                gu[i as usize * d + c] += coef * v[c];
                gv[w as usize * d + c] += coef * u[c];
            }
        }
    }
    (gu, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::batch_objective;

    fn random_store(vocab: usize, dim: usize, seed: u64) -> FullVectorStore {
        let mut s = FullVectorStore::new(vocab, dim, seed);
        let mut d = SeededDraw::new(seed ^ 0xABCD);
        for x in s.output.iter_mut() {
            *x = (d.next_f64() - 0.5) as f32;
        }
        s
    }

    #[test]
    fn zero_alpha_is_identity() {
        let mut s = random_store(5, 3, 1);
        let before = s.clone();
        let noise = NoiseTable::from_counts(&[5, 4, 3, 2, 1]);
        let batch = Minibatch {
            inputs: vec![0, 0],
            outputs: vec![vec![1, 2], vec![3]],
            batch_id: 0,
        };
        oracle_step(&mut s, &noise, &batch, 2, 0.0, 4).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn small_step_increases_restricted_objective() {
        let noise = NoiseTable::from_counts(&[8, 6, 4, 3, 2, 1]);
        for seed in 0..20 {
            let mut s = random_store(6, 4, seed);
            let batch = Minibatch {
                inputs: vec![(seed % 6) as u32],
                outputs: vec![vec![((seed + 1) % 6) as u32]],
                batch_id: 0,
            };
            let before = batch_objective(&s, &noise, &batch, 3, seed);
            oracle_step(&mut s, &noise, &batch, 3, 1e-3, seed).unwrap();
            let after = batch_objective(&s, &noise, &batch, 3, seed);
            assert!(after > before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let mut s = FullVectorStore::new(3, 2, 1);
        let noise = NoiseTable::from_counts(&[1, 1, 1]);
        let batch = Minibatch {
            inputs: vec![5],
            outputs: vec![vec![0]],
            batch_id: 0,
        };
        assert!(oracle_step(&mut s, &noise, &batch, 1, 0.1, 1).is_err());
    }

    #[test]
    fn deterministic_training() {
        let vocab =
            Vocabulary::from_counts((0..8).map(|i| (format!("w{i}"), 20 - i as u64))).unwrap();
        let corpus = IndexedCorpus::from_sentences(
            (0..30)
                .map(|s| (0..7).map(|j| ((s * 3 + j * 5) % 8) as u32).collect())
                .collect(),
        );
        let config = TrainConfig {
            dim: 6,
            epochs: 2,
            batch_size: 3,
            subsample: 0.0,
            ..Default::default()
        };
        let (a, sa) = oracle_train(&corpus, &vocab, &config).unwrap();
        let (b, sb) = oracle_train(&corpus, &vocab, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.pairs, sb.pairs);
        assert!(sa.steps > 0);
    }
}

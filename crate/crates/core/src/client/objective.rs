use crate::corpus::Minibatch;
use crate::sampler::{derive_seed, NoiseTable, SeededDraw};
use crate::store::{FullVectorStore, Matrix};

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `ln sigma(x)` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Restricted objective of one minibatch: for every (input, context) pair,
/// `ln sigma(u.v_O) + sum_k ln sigma(-u.v_k)`, with the negatives a shard
/// would draw for a call seeded with `seed`. Evaluated in f64.
pub fn batch_objective(
    store: &FullVectorStore,
    noise: &NoiseTable,
    batch: &Minibatch,
    negatives: u32,
    seed: u64,
) -> f64 {
    let mut draw = SeededDraw::new(seed);
    let mut negs = Vec::with_capacity(negatives as usize);
    let mut total = 0.0;
    for (w_in, w_out) in batch.iter_pairs() {
        negs.clear();
        noise.fill_negatives(&mut draw, w_out, negatives as usize, &mut negs);
        let u = store.row(Matrix::Input, w_in);
        total += log_sigmoid(dot64(u, store.row(Matrix::Output, w_out)));
        for &k in &negs {
            total += log_sigmoid(-dot64(u, store.row(Matrix::Output, k)));
        }
    }
    total
}

/// Sum of [`batch_objective`] over a sample of minibatches, each with
/// negatives fixed by `derive_seed([seed, batch_id])`.
pub fn objective(
    store: &FullVectorStore,
    noise: &NoiseTable,
    batches: &[Minibatch],
    negatives: u32,
    seed: u64,
) -> f64 {
    batches
        .iter()
        .map(|b| batch_objective(store, noise, b, negatives, derive_seed(&[seed, b.batch_id])))
        .sum()
}

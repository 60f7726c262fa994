//! Seed-deterministic negative sampling.
//!
//! Every shard must regenerate exactly the same negative words for a given
//! seed, both within a `dotprod` call and in the paired `adjust` call. The
//! generator and the table lookup below are therefore part of the wire
//! protocol (see `docs/protocol.md`) and must not change without a protocol
//! version bump.

use crate::corpus::Vocabulary;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const NOISE_EXPONENT: f64 = 0.75;

/// SplitMix64 finalizer: a stateless 64-bit mixing function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered list of integers into one seed.
///
/// Used to derive per-epoch, per-client and per-minibatch seeds from the run
/// seed so every derived stream is reproducible.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C909, |h, &p| {
        mix64(h ^ mix64(p.wrapping_add(GOLDEN_GAMMA)))
    })
}

/// SplitMix64 generator, fully determined by its seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededDraw {
    state: u64,
}

impl SeededDraw {
    pub fn new(seed: u64) -> Self {
        SeededDraw { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `0..n` via 128-bit multiply-high. `n` must be nonzero.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }
}

/// Walker/Vose alias table over vocabulary indices with `P(w) ∝ count(w)^0.75`.
#[derive(Debug, Clone)]
pub struct NoiseTable {
    probabilities: Vec<f64>,
    accept: Vec<f64>,
    alias: Vec<u32>,
}

impl NoiseTable {
    pub fn from_vocabulary(vocab: &Vocabulary) -> Self {
        let counts: Vec<u64> = vocab.entries().iter().map(|e| e.count).collect();
        Self::from_counts(&counts)
    }

    /// Builds the table from raw counts. Counts must be nonzero and non-empty.
    pub fn from_counts(counts: &[u64]) -> Self {
        assert!(!counts.is_empty(), "noise table needs at least one word");
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| {
                assert!(c > 0, "zero count in noise table");
                (c as f64).powf(NOISE_EXPONENT)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let n = probabilities.len();
        let mut scaled: Vec<f64> = probabilities.iter().map(|p| p * n as f64).collect();
        let mut accept = vec![1.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let mut small = Vec::new();
        let mut large = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&l), Some(&g)) = (small.last(), large.last()) {
            small.pop();
            large.pop();
            accept[l] = scaled[l];
            alias[l] = g as u32;
            scaled[g] = (scaled[g] + scaled[l]) - 1.0;
            if scaled[g] < 1.0 {
                small.push(g);
            } else {
                large.push(g);
            }
        }
        // Leftovers on either stack keep accept = 1 (numerical residue).

        NoiseTable {
            probabilities,
            accept,
            alias,
        }
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    #[inline]
    pub fn sample(&self, draw: &mut SeededDraw) -> u32 {
        let column = draw.next_below(self.accept.len() as u64) as usize;
        let u = draw.next_f64();
        if u < self.accept[column] {
            column as u32
        } else {
            self.alias[column]
        }
    }

    /// Appends `count` negatives to `out`, none equal to `exclude`.
    ///
    /// Collisions with `exclude` are rejected and redrawn. Requires at least
    /// two words in the table when `count > 0`.
    #[inline]
    pub fn fill_negatives(
        &self,
        draw: &mut SeededDraw,
        exclude: u32,
        count: usize,
        out: &mut Vec<u32>,
    ) {
        debug_assert!(count == 0 || self.len() >= 2);
        for _ in 0..count {
            loop {
                let w = self.sample(draw);
                if w != exclude {
                    out.push(w);
                    break;
                }
            }
        }
    }
}

/// Draws `count` negative word indices, none equal to `exclude`.
pub fn draw_negatives(
    table: &NoiseTable,
    draw: &mut SeededDraw,
    exclude: u32,
    count: usize,
) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    table.fill_negatives(draw, exclude, count, &mut out);
    out
}

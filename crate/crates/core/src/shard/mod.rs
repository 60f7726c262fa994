//! Parameter-server shard: partial dot products and partial vector
//! updates over one column slice.

mod server;

use std::collections::HashMap;
use std::sync::Arc;

pub use server::{handle_frame, ServerConfig, ServerHandle, ShardServer};

use crate::corpus::Minibatch;
use crate::error::{Error, Result};
use crate::sampler::{NoiseTable, SeededDraw};
use crate::store::{Matrix, PartialVectorStore, ShardLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct DotprodRequest {
    pub inputs: Vec<u32>,
    pub outputs: Vec<Vec<u32>>,
    pub seed: u64,
    pub negatives: u32,
}

impl DotprodRequest {
    pub fn new(batch: &Minibatch, seed: u64, negatives: u32) -> Self {
        DotprodRequest {
            inputs: batch.inputs.clone(),
            outputs: batch.outputs.clone(),
            seed,
            negatives,
        }
    }

    pub fn pairs(&self) -> usize {
        self.outputs.iter().map(Vec::len).sum()
    }
}

/// Per-shard partial dot products in row-major pair order.
///
/// `f_minus` holds `negatives` entries per pair, in draw order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartialDotResult {
    pub f_plus: Vec<f32>,
    pub f_minus: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustRequest {
    pub inputs: Vec<u32>,
    pub outputs: Vec<Vec<u32>>,
    pub g_plus: Vec<f32>,
    pub g_minus: Vec<f32>,
    /// Must equal the seed of the paired dotprod call.
    pub seed: u64,
    pub negatives: u32,
}

impl AdjustRequest {
    pub fn pairs(&self) -> usize {
        self.outputs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardInfo {
    pub shard_id: u32,
    pub num_shards: u32,
    pub dim: u32,
    pub lo: u32,
    pub hi: u32,
    pub vocab_size: u32,
}

/// Sparse per-call accumulator of row deltas.
struct Scratch {
    width: usize,
    slots: HashMap<u32, usize>,
    data: Vec<f32>,
}

impl Scratch {
    fn new(width: usize) -> Self {
        Scratch {
            width,
            slots: HashMap::new(),
            data: Vec::new(),
        }
    }

    #[inline]
    fn row(&mut self, word: u32) -> &mut [f32] {
        let next = self.slots.len();
        let slot = *self.slots.entry(word).or_insert(next);
        if slot == next {
            self.data.resize(self.data.len() + self.width, 0.0);
        }
        &mut self.data[slot * self.width..(slot + 1) * self.width]
    }

    /// `(word, delta)` in ascending word order.
    fn into_sorted(self) -> Vec<(u32, Vec<f32>)> {
        let mut entries: Vec<(u32, usize)> = self.slots.into_iter().collect();
        entries.sort_unstable();
        entries
            .into_iter()
            .map(|(w, slot)| {
                (
                    w,
                    self.data[slot * self.width..(slot + 1) * self.width].to_vec(),
                )
            })
            .collect()
    }
}

/// `acc[c] += g * x[c]` for every column.
#[inline]
fn axpy(acc: &mut [f32], g: f32, x: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += g * b;
    }
}

/// A shard's state: its column slice plus the shared noise distribution.
#[derive(Debug)]
pub struct Shard {
    store: PartialVectorStore,
    noise: Arc<NoiseTable>,
}

impl Shard {
    pub fn new(store: PartialVectorStore, noise: Arc<NoiseTable>) -> Result<Self> {
        if noise.len() != store.vocab_size() {
            return Err(Error::Config(format!(
                "noise table covers {} words, store has {}",
                noise.len(),
                store.vocab_size()
            )));
        }
        Ok(Shard { store, noise })
    }

    /// Builds shard `shard_id` of `layout` with freshly initialized vectors.
    pub fn init(
        shard_id: usize,
        layout: &ShardLayout,
        noise: Arc<NoiseTable>,
        seed: u64,
    ) -> Result<Self> {
        let store = PartialVectorStore::new(shard_id, layout, noise.len(), seed)?;
        Shard::new(store, noise)
    }

    pub fn store(&self) -> &PartialVectorStore {
        &self.store
    }

    pub fn noise(&self) -> &NoiseTable {
        &self.noise
    }

    pub fn info(&self) -> ShardInfo {
        let cols = self.store.columns();
        ShardInfo {
            shard_id: self.store.shard_id() as u32,
            num_shards: self.store.layout().num_shards() as u32,
            dim: self.store.layout().dim() as u32,
            lo: cols.start as u32,
            hi: cols.end as u32,
            vocab_size: self.store.vocab_size() as u32,
        }
    }

    fn validate(&self, inputs: &[u32], outputs: &[Vec<u32>], negatives: u32) -> Result<usize> {
        if inputs.len() != outputs.len() {
            return Err(Error::Shape(format!(
                "{} input words but {} context lists",
                inputs.len(),
                outputs.len()
            )));
        }
        let vocab_size = self.store.vocab_size();
        for &w in inputs.iter().chain(outputs.iter().flatten()) {
            if w as usize >= vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: w,
                    vocab_size,
                });
            }
        }
        let pairs = outputs.iter().map(Vec::len).sum();
        if negatives > 0 && pairs > 0 && vocab_size < 2 {
            return Err(Error::Config(
                "negative sampling needs at least two words".into(),
            ));
        }
        Ok(pairs)
    }

    pub fn dotprod(&self, req: &DotprodRequest) -> Result<PartialDotResult> {
        self.dotprod_traced(req, None)
    }

    /// `dotprod`, optionally recording every negative drawn.
    pub fn dotprod_traced(
        &self,
        req: &DotprodRequest,
        mut trace: Option<&mut Vec<u32>>,
    ) -> Result<PartialDotResult> {
        let pairs = self.validate(&req.inputs, &req.outputs, req.negatives)?;
        let n = req.negatives as usize;
        let mut draw = SeededDraw::new(req.seed);
        let mut result = PartialDotResult {
            f_plus: Vec::with_capacity(pairs),
            f_minus: Vec::with_capacity(pairs * n),
        };
        let mut negs = Vec::with_capacity(n);
        for (&w_in, ctx) in req.inputs.iter().zip(&req.outputs) {
            for &w_out in ctx {
                negs.clear();
                self.noise.fill_negatives(&mut draw, w_out, n, &mut negs);
                result.f_plus.push(self.store.partial_dot(w_in, w_out));
                for &ns in &negs {
                    result.f_minus.push(self.store.partial_dot(w_in, ns));
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.extend_from_slice(&negs);
                }
            }
        }
        Ok(result)
    }

    pub fn adjust(&self, req: &AdjustRequest) -> Result<()> {
        self.adjust_traced(req, None)
    }

    /// Applies `u += G v`, `v += G u` over the call's pairs and regenerated
    /// negatives. Every read sees pre-call values; deltas are accumulated in
    /// scratch and written in ascending word order when the call finishes.
    pub fn adjust_traced(
        &self,
        req: &AdjustRequest,
        mut trace: Option<&mut Vec<u32>>,
    ) -> Result<()> {
        let pairs = self.validate(&req.inputs, &req.outputs, req.negatives)?;
        let n = req.negatives as usize;
        if req.g_plus.len() != pairs || req.g_minus.len() != pairs * n {
            return Err(Error::Shape(format!(
                "expected {pairs} positive and {} negative coefficients, got {} and {}",
                pairs * n,
                req.g_plus.len(),
                req.g_minus.len()
            )));
        }
        if !req.g_plus.iter().chain(&req.g_minus).all(|g| g.is_finite()) {
            return Err(Error::Shape("non-finite gradient coefficient".into()));
        }

        let width = self.store.width();
        let mut du = Scratch::new(width);
        let mut dv = Scratch::new(width);
        let mut u = vec![0.0f32; width];
        let mut v = vec![0.0f32; width];
        let mut draw = SeededDraw::new(req.seed);
        let mut negs = Vec::with_capacity(n);
        let mut pos = 0;
        let mut neg = 0;
        for (&w_in, ctx) in req.inputs.iter().zip(&req.outputs) {
            self.store.read_row(Matrix::Input, w_in, &mut u);
            for &w_out in ctx {
                negs.clear();
                self.noise.fill_negatives(&mut draw, w_out, n, &mut negs);
                let g = req.g_plus[pos];
                pos += 1;
                self.store.read_row(Matrix::Output, w_out, &mut v);
                axpy(du.row(w_in), g, &v);
                axpy(dv.row(w_out), g, &u);
                for &ns in &negs {
                    let g = req.g_minus[neg];
                    neg += 1;
                    self.store.read_row(Matrix::Output, ns, &mut v);
                    axpy(du.row(w_in), g, &v);
                    axpy(dv.row(ns), g, &u);
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.extend_from_slice(&negs);
                }
            }
        }
        for (w, delta) in du.into_sorted() {
            self.store.add_to_row(Matrix::Input, w, &delta);
        }
        for (w, delta) in dv.into_sorted() {
            self.store.add_to_row(Matrix::Output, w, &delta);
        }
        Ok(())
    }

    /// Partial rows `start..start + count` of one matrix, flattened.
    pub fn export_rows(&self, matrix: Matrix, start: u32, count: u32) -> Result<Vec<f32>> {
        let end = start as usize + count as usize;
        if end > self.store.vocab_size() {
            return Err(Error::IndexOutOfRange {
                index: end.saturating_sub(1) as u32,
                vocab_size: self.store.vocab_size(),
            });
        }
        let width = self.store.width();
        let mut out = vec![0.0; count as usize * width];
        for (i, chunk) in out
            .chunks_exact_mut(width.max(1))
            .enumerate()
            .take(count as usize)
        {
            self.store.read_row(matrix, start + i as u32, chunk);
        }
        Ok(out)
    }
}

//! Column-partitioned embedding storage.
//!
//! Shard `s` keeps columns `[lo_s, hi_s)` of every input vector `u(w)` and
//! output vector `v(w)`. Rows are indexed by vocabulary index.

use std::io::{self, BufRead, Write};
use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::sampler::{derive_seed, mix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Matrix {
    Input,
    Output,
}

impl Matrix {
    pub fn code(self) -> u8 {
        match self {
            Matrix::Input => 0,
            Matrix::Output => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Matrix::Input),
            1 => Some(Matrix::Output),
            _ => None,
        }
    }
}

/// Contiguous equi-partition of `dim` columns over `num_shards` shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardLayout {
    dim: usize,
    ranges: Vec<Range<usize>>,
}

impl ShardLayout {
    /// The first `dim % shards` shards get one extra column.
    pub fn new(dim: usize, num_shards: usize) -> Result<Self> {
        if num_shards == 0 || dim == 0 || num_shards > dim {
            return Err(Error::Layout {
                dim,
                shards: num_shards,
            });
        }
        let base = dim / num_shards;
        let extra = dim % num_shards;
        let mut ranges = Vec::with_capacity(num_shards);
        let mut lo = 0;
        for s in 0..num_shards {
            let width = base + usize::from(s < extra);
            ranges.push(lo..lo + width);
            lo += width;
        }
        Ok(ShardLayout { dim, ranges })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, shard: usize) -> Range<usize> {
        self.ranges[shard].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn width(&self, shard: usize) -> usize {
        self.ranges[shard].len()
    }
}

/// Initial value of one component, a pure function of `(seed, matrix, word, column)`.
///
/// Input components are uniform on `[-0.5/d, 0.5/d)`; output components are zero.
#[inline]
pub fn initial_component(seed: u64, matrix: Matrix, word: u32, column: usize, dim: usize) -> f32 {
    match matrix {
        Matrix::Output => 0.0,
        Matrix::Input => {
            let h = mix64(derive_seed(&[seed, word as u64]) ^ mix64(column as u64));
            let unit = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            ((unit - 0.5) / dim as f64) as f32
        }
    }
}

#[inline]
fn load(cell: &AtomicU32) -> f32 {
    f32::from_bits(cell.load(Ordering::Relaxed))
}

#[inline]
fn store(cell: &AtomicU32, value: f32) {
    cell.store(value.to_bits(), Ordering::Relaxed)
}

/// One shard's slice of the input and output matrices.
///
/// Components are individually atomic 32-bit cells accessed with relaxed
/// ordering. Concurrent calls may interleave reads and writes of the same
/// rows; no per-row consistency is provided.
#[derive(Debug)]
pub struct PartialVectorStore {
    shard_id: usize,
    layout: ShardLayout,
    vocab_size: usize,
    width: usize,
    input: Vec<AtomicU32>,
    output: Vec<AtomicU32>,
}

impl PartialVectorStore {
    pub fn new(
        shard_id: usize,
        layout: &ShardLayout,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if shard_id >= layout.num_shards() {
            return Err(Error::Config(format!(
                "shard id {shard_id} out of range for {} shards",
                layout.num_shards()
            )));
        }
        let range = layout.range(shard_id);
        let width = range.len();
        let dim = layout.dim();
        let mut input = Vec::with_capacity(vocab_size * width);
        for w in 0..vocab_size as u32 {
            for c in range.clone() {
                input.push(AtomicU32::new(
                    initial_component(seed, Matrix::Input, w, c, dim).to_bits(),
                ));
            }
        }
        let output = (0..vocab_size * width)
            .map(|_| AtomicU32::new(0f32.to_bits()))
            .collect();
        Ok(PartialVectorStore {
            shard_id,
            layout: layout.clone(),
            vocab_size,
            width,
            input,
            output,
        })
    }

    pub fn shard_id(&self) -> usize {
        self.shard_id
    }

    pub fn layout(&self) -> &ShardLayout {
        &self.layout
    }

    pub fn columns(&self) -> Range<usize> {
        self.layout.range(self.shard_id)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn cells(&self, matrix: Matrix) -> &[AtomicU32] {
        match matrix {
            Matrix::Input => &self.input,
            Matrix::Output => &self.output,
        }
    }

    #[inline]
    pub fn row(&self, matrix: Matrix, word: u32) -> &[AtomicU32] {
        let start = word as usize * self.width;
        &self.cells(matrix)[start..start + self.width]
    }

    /// Copies one partial row into `out`.
    #[inline]
    pub fn read_row(&self, matrix: Matrix, word: u32, out: &mut [f32]) {
        for (o, cell) in out.iter_mut().zip(self.row(matrix, word)) {
            *o = load(cell);
        }
    }

    pub fn row_vec(&self, matrix: Matrix, word: u32) -> Vec<f32> {
        let mut out = vec![0.0; self.width];
        self.read_row(matrix, word, &mut out);
        out
    }

    /// `row += delta`, component by component.
    #[inline]
    pub fn add_to_row(&self, matrix: Matrix, word: u32, delta: &[f32]) {
        for (cell, d) in self.row(matrix, word).iter().zip(delta) {
            let updated = load(cell) + d;
            debug_assert!(updated.is_finite(), "non-finite component after update");
            store(cell, updated);
        }
    }

    /// Dot product of `u_s(a)` and `v_s(b)`: f64 accumulation in ascending
    /// column order, rounded once to f32.
    #[inline]
    pub fn partial_dot(&self, input_word: u32, output_word: u32) -> f32 {
        let u = self.row(Matrix::Input, input_word);
        let v = self.row(Matrix::Output, output_word);
        let mut acc = 0.0f64;
        for (a, b) in u.iter().zip(v) {
            acc += load(a) as f64 * load(b) as f64;
        }
        acc as f32
    }

    /// Overwrites a row. Used to stage test states.
    pub fn set_row(&self, matrix: Matrix, word: u32, values: &[f32]) {
        assert_eq!(values.len(), self.width);
        for (cell, &x) in self.row(matrix, word).iter().zip(values) {
            store(cell, x);
        }
    }

    /// Flat row-major copy of one matrix slice.
    pub fn snapshot(&self, matrix: Matrix) -> Vec<f32> {
        self.cells(matrix).iter().map(load).collect()
    }

    /// One `(word, partial row)` per vocabulary word.
    pub fn export_partials(&self, matrix: Matrix) -> Vec<(u32, Vec<f32>)> {
        (0..self.vocab_size as u32)
            .map(|w| (w, self.row_vec(matrix, w)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.input
            .iter()
            .chain(&self.output)
            .all(|c| load(c).is_finite())
    }
}

/// Full `|V| x d` input and output matrices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FullVectorStore {
    pub vocab_size: usize,
    pub dim: usize,
    pub input: Vec<f32>,
    pub output: Vec<f32>,
}

impl FullVectorStore {
    /// Same initialization as every `PartialVectorStore` built from `seed`.
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut input = Vec::with_capacity(vocab_size * dim);
        for w in 0..vocab_size as u32 {
            for c in 0..dim {
                input.push(initial_component(seed, Matrix::Input, w, c, dim));
            }
        }
        FullVectorStore {
            vocab_size,
            dim,
            input,
            output: vec![0.0; vocab_size * dim],
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        FullVectorStore {
            vocab_size,
            dim,
            input: vec![0.0; vocab_size * dim],
            output: vec![0.0; vocab_size * dim],
        }
    }

    pub fn matrix(&self, matrix: Matrix) -> &[f32] {
        match matrix {
            Matrix::Input => &self.input,
            Matrix::Output => &self.output,
        }
    }

    pub fn matrix_mut(&mut self, matrix: Matrix) -> &mut [f32] {
        match matrix {
            Matrix::Input => &mut self.input,
            Matrix::Output => &mut self.output,
        }
    }

    pub fn row(&self, matrix: Matrix, word: u32) -> &[f32] {
        let start = word as usize * self.dim;
        &self.matrix(matrix)[start..start + self.dim]
    }

    pub fn row_mut(&mut self, matrix: Matrix, word: u32) -> &mut [f32] {
        let start = word as usize * self.dim;
        let dim = self.dim;
        &mut self.matrix_mut(matrix)[start..start + dim]
    }

    /// Writes one shard's partial rows into their columns.
    pub fn place_partials(
        &mut self,
        columns: Range<usize>,
        matrix: Matrix,
        rows: &[(u32, Vec<f32>)],
    ) -> Result<()> {
        if columns.end > self.dim {
            return Err(Error::Shape(format!(
                "columns {columns:?} exceed dimension {}",
                self.dim
            )));
        }
        for (w, values) in rows {
            if *w as usize >= self.vocab_size {
                return Err(Error::IndexOutOfRange {
                    index: *w,
                    vocab_size: self.vocab_size,
                });
            }
            if values.len() != columns.len() {
                return Err(Error::Shape(format!(
                    "row of {} values for {} columns",
                    values.len(),
                    columns.len()
                )));
            }
            self.row_mut(matrix, *w)[columns.clone()].copy_from_slice(values);
        }
        Ok(())
    }

    /// Concatenates shard slices column-wise.
    pub fn assemble(shards: &[&PartialVectorStore]) -> Result<Self> {
        let first = shards
            .first()
            .ok_or_else(|| Error::Shape("no shards to assemble".into()))?;
        let layout = first.layout().clone();
        if shards.len() != layout.num_shards() {
            return Err(Error::Shape(format!(
                "{} stores for a {}-shard layout",
                shards.len(),
                layout.num_shards()
            )));
        }
        let mut full = FullVectorStore::zeros(first.vocab_size(), layout.dim());
        for shard in shards {
            for matrix in [Matrix::Input, Matrix::Output] {
                full.place_partials(shard.columns(), matrix, &shard.export_partials(matrix))?;
            }
        }
        Ok(full)
    }
}

/// Writes input vectors in word2vec text format: a `count dim` header line,
/// then `word c1 ... cd` per word.
///
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_text_vectors<W: Write>(
    vocab: &Vocabulary,
    dim: usize,
    input: &[f32],
    mut out: W,
) -> io::Result<()> {
    assert_eq!(input.len(), vocab.len() * dim);
    writeln!(out, "{} {}", vocab.len(), dim)?;
    for (entry, row) in vocab.entries().iter().zip(input.chunks_exact(dim.max(1))) {
        write!(out, "{}", entry.word)?;
        for x in row {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses word2vec text format into `(words, dim, flat rows)`.
pub fn read_text_vectors<R: BufRead>(input: R) -> Result<(Vec<String>, usize, Vec<f32>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header"))??;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|x| x.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad word count"))?;
    let dim: usize = parts
        .next()
        .and_then(|x| x.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad dimension"))?;
    let mut words = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let word = fields.next().unwrap_or_default().to_string();
        let before = values.len();
        for f in fields.filter(|f| !f.is_empty()) {
            values.push(
                f.parse::<f32>()
                    .map_err(|e| Error::parse(n + 2, e.to_string()))?,
            );
        }
        if values.len() - before != dim {
            return Err(Error::parse(n + 2, format!("expected {dim} components")));
        }
        words.push(word);
    }
    if words.len() != count {
        return Err(Error::parse(
            0,
            format!("header declares {count} words, found {}", words.len()),
        ));
    }
    Ok((words, dim, values))
}

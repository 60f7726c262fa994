//! Traffic models for a conventional word-partitioned parameter server and
//! for the column-partitioned scheme, and a comparison against metered
//! traffic.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::meter::MeterSnapshot;
use crate::error::{Error, Result};

const FLOAT_BYTES: f64 = 4.0;

fn check(name: &str, x: f64, allow_zero: bool) -> Result<()> {
    if !x.is_finite() || x < 0.0 || (!allow_zero && x == 0.0) {
        return Err(Error::Config(format!(
            "{name} must be {}, got {x}",
            if allow_zero {
                "non-negative"
            } else {
                "positive"
            }
        )));
    }
    Ok(())
}

/// Bytes per minibatch word moved by each get (and each put) of a
/// conventional parameter server: `(2 + w*n) * d * 4`.
pub fn predicted_conventional_bytes(w: f64, n: f64, d: f64) -> Result<f64> {
    check("w", w, true)?;
    check("n", n, true)?;
    check("d", d, false)?;
    Ok((2.0 + w * n) * d * FLOAT_BYTES)
}

/// Bytes per minibatch word in each direction for column-partitioned
/// shards: `w * (n + 1) * S * 4`.
pub fn predicted_proposed_bytes(w: f64, n: f64, shards: f64) -> Result<f64> {
    check("w", w, true)?;
    check("n", n, true)?;
    check("S", shards, false)?;
    Ok(w * (n + 1.0) * shards * FLOAT_BYTES)
}

/// Upper bound on F bytes returned by all shards for one dotprod broadcast
/// of `b` words: `b * w * (n + 1) * S * 4`.
pub fn predicted_proposed_batch_bytes(b: f64, w: f64, n: f64, shards: f64) -> Result<f64> {
    check("b", b, true)?;
    Ok(b * predicted_proposed_bytes(w, n, shards)?)
}

/// First-order ratio of proposed to conventional traffic, `S / d`.
pub fn approximate_ratio(shards: f64, d: f64) -> Result<f64> {
    check("S", shards, false)?;
    check("d", d, false)?;
    Ok(shards / d)
}

/// Exact ratio `r'(w, n, S) / r(w, n, d)`.
pub fn exact_ratio(w: f64, n: f64, shards: f64, d: f64) -> Result<f64> {
    Ok(predicted_proposed_bytes(w, n, shards)? / predicted_conventional_bytes(w, n, d)?)
}

/// Aggregate bandwidth in Gbit/s needed to move `bytes_per_word` for
/// `words` words over `iterations` passes in `seconds`.
pub fn required_gbit_per_sec(
    iterations: f64,
    words: f64,
    bytes_per_word: f64,
    seconds: f64,
) -> f64 {
    iterations * words * bytes_per_word * 8.0 / (seconds * 1e9)
}

/// Total bytes a conventional parameter server would move for a run with
/// the given counts, counting every vector without deduplication.
///
/// Per vector: a 4-byte index in the get request, `4d` bytes in the get
/// response, and `4 + 4d` bytes (index plus gradient) in the put request.
pub fn simulated_conventional_bytes(words: u64, pairs: u64, negative_samples: u64, d: u64) -> u64 {
    (words + pairs + negative_samples) * 8 * (d + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthModel {
    /// Context words per input word used for the upper bound (`2B`).
    pub max_contexts: f64,
    pub negatives: f64,
    pub shards: f64,
    pub dim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub steps: u64,
    pub minibatch_words: u64,
    pub realized_contexts: Option<f64>,
    /// F bytes per word received from all shards.
    pub measured_f_per_word: Option<f64>,
    /// G bytes per word sent to all shards.
    pub measured_g_per_word: Option<f64>,
    /// `r'` at the configured maximum context size.
    pub predicted_upper: f64,
    /// `r'` at the realized average context size.
    pub predicted_realized: Option<f64>,
    pub overhead_sent_per_word: Option<f64>,
    pub overhead_received_per_word: Option<f64>,
    pub index_share: Option<f64>,
    pub payload_share: Option<f64>,
    pub conventional_per_word: Option<f64>,
    pub within_bound: bool,
}

/// Compares metered scalar payload against the per-word model. Framing and
/// index bytes are reported separately.
pub fn measured_vs_predicted(
    meter: &MeterSnapshot,
    model: &BandwidthModel,
) -> Result<BandwidthReport> {
    let predicted_upper =
        predicted_proposed_bytes(model.max_contexts, model.negatives, model.shards)?;
    let words = meter.minibatch_words;
    if words == 0 {
        return Ok(BandwidthReport {
            steps: meter.steps,
            minibatch_words: 0,
            realized_contexts: None,
            measured_f_per_word: None,
            measured_g_per_word: None,
            predicted_upper,
            predicted_realized: None,
            overhead_sent_per_word: None,
            overhead_received_per_word: None,
            index_share: None,
            payload_share: None,
            conventional_per_word: None,
            within_bound: true,
        });
    }
    let per_word = |x: u64| x as f64 / words as f64;
    let realized = meter.pairs as f64 / words as f64;
    let f = per_word(meter.payload_received);
    let g = per_word(meter.payload_sent);
    let total = meter.total_bytes() as f64;
    let payload = (meter.payload_sent + meter.payload_received) as f64;
    // Tolerate float rounding in the comparison, not in the counts.
    let bound = predicted_upper * (1.0 + 1e-12);
    Ok(BandwidthReport {
        steps: meter.steps,
        minibatch_words: words,
        realized_contexts: Some(realized),
        measured_f_per_word: Some(f),
        measured_g_per_word: Some(g),
        predicted_upper,
        predicted_realized: Some(predicted_proposed_bytes(
            realized,
            model.negatives,
            model.shards,
        )?),
        overhead_sent_per_word: Some(per_word(meter.overhead_sent())),
        overhead_received_per_word: Some(per_word(meter.overhead_received())),
        index_share: Some((total - payload) / total),
        payload_share: Some(payload / total),
        conventional_per_word: Some(predicted_conventional_bytes(
            realized,
            model.negatives,
            model.dim,
        )?),
        within_bound: f <= bound && g <= bound,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
}

impl fmt::Display for BandwidthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps                         {}", self.steps)?;
        writeln!(f, "minibatch words               {}", self.minibatch_words)?;
        writeln!(
            f,
            "realized contexts per word    {}",
            opt(self.realized_contexts)
        )?;
        writeln!(
            f,
            "F bytes/word (shards->client) {}",
            opt(self.measured_f_per_word)
        )?;
        writeln!(
            f,
            "G bytes/word (client->shards) {}",
            opt(self.measured_g_per_word)
        )?;
        writeln!(
            f,
            "predicted r' (max contexts)   {:.2}",
            self.predicted_upper
        )?;
        writeln!(
            f,
            "predicted r' (realized)       {}",
            opt(self.predicted_realized)
        )?;
        writeln!(
            f,
            "overhead bytes/word sent      {}",
            opt(self.overhead_sent_per_word)
        )?;
        writeln!(
            f,
            "overhead bytes/word received  {}",
            opt(self.overhead_received_per_word)
        )?;
        writeln!(f, "overhead share of traffic     {}", opt(self.index_share))?;
        writeln!(
            f,
            "conventional r (realized)     {}",
            opt(self.conventional_per_word)
        )?;
        write!(f, "payload within bound          {}", self.within_bound)
    }
}

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{aggregate_partials, coefficients, ShardSet, TrainConfig};
use crate::corpus::{subsample, IndexedCorpus, Minibatch, MinibatchIter, Vocabulary, WindowSpec};
use crate::error::{Error, Result};
use crate::sampler::derive_seed;
use crate::shard::{AdjustRequest, DotprodRequest};
use crate::transport::{Request, Response};

const EPOCH_STREAM: u64 = 0x4550_4f43; // "EPOC"
const RETRY_STREAM: u64 = 0x5245_5452; // "RETR"

/// Seed broadcast with one minibatch's dotprod and adjust calls.
pub fn step_seed(global_seed: u64, epoch: u32, client: u32, batch_id: u64) -> u64 {
    derive_seed(&[global_seed, epoch as u64, client as u64, batch_id])
}

/// Window and subsampling parameters for one client's pass in one epoch.
/// Each epoch redraws both.
pub fn epoch_spec(config: &TrainConfig, epoch: u32, client: u32) -> WindowSpec {
    let spec = WindowSpec::new(
        config.window,
        config.subsample,
        derive_seed(&[config.seed, EPOCH_STREAM, epoch as u64, client as u64]),
    );
    if config.dynamic_window {
        spec
    } else {
        spec.fixed()
    }
}

/// Linear decay from `alpha0` to a floor over all epochs, driven by the
/// fraction of input words processed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRate {
    pub alpha0: f64,
    pub floor: f64,
    pub epochs: u32,
}

impl LearningRate {
    pub fn from_config(config: &TrainConfig) -> Self {
        LearningRate {
            alpha0: config.alpha,
            floor: config.alpha_min(),
            epochs: config.epochs,
        }
    }

    /// Rate after `done` of `epoch_total` input words of epoch `epoch`.
    pub fn at(&self, epoch: u32, done: u64, epoch_total: u64) -> f64 {
        let within = if epoch_total == 0 {
            0.0
        } else {
            done as f64 / epoch_total as f64
        };
        let progress = (epoch as f64 + within) / self.epochs.max(1) as f64;
        (self.alpha0 * (1.0 - progress)).max(self.floor)
    }
}

/// Counts for one completed step. Byte counts are wire bytes of the
/// step's frames to and from all shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub inputs: u64,
    pub pairs: u64,
    pub negatives: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Dotprod,
    Adjust,
}

fn try_step(
    shards: &ShardSet,
    batch: &Minibatch,
    negatives: u32,
    alpha: f64,
    seed: u64,
) -> std::result::Result<StepStats, (Phase, Error)> {
    let dot = DotprodRequest::new(batch, seed, negatives);
    let pairs = dot.pairs() as u64;
    let mut stats = StepStats {
        inputs: batch.len() as u64,
        pairs,
        negatives: pairs * negatives as u64,
        ..Default::default()
    };

    let request = Request::Dotprod(dot);
    let pending = shards
        .links()
        .iter()
        .map(|l| l.submit(&request))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| (Phase::Dotprod, e))?;
    let mut partials = Vec::with_capacity(pending.len());
    for call in pending {
        stats.bytes_sent += call.request_bytes() as u64;
        let reply = call.wait().map_err(|e| (Phase::Dotprod, e))?;
        stats.bytes_received += reply.wire_bytes as u64;
        match reply.response {
            Response::Dotprod(r) => partials.push(r),
            other => {
                return Err((
                    Phase::Dotprod,
                    Error::Protocol(format!("expected dotprod response, got {:?}", other.kind())),
                ))
            }
        }
    }
    // Every dotprod response is in before any adjust goes out.
    let f = aggregate_partials(&partials).map_err(|e| (Phase::Dotprod, e))?;
    let g = coefficients(&f, alpha);
    let Request::Dotprod(dot) = request else {
        unreachable!()
    };
    let request = Request::Adjust(AdjustRequest {
        inputs: dot.inputs,
        outputs: dot.outputs,
        g_plus: g.g_plus,
        g_minus: g.g_minus,
        seed,
        negatives,
    });
    let pending = shards
        .links()
        .iter()
        .map(|l| l.submit(&request))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| (Phase::Adjust, e))?;
    for call in pending {
        stats.bytes_sent += call.request_bytes() as u64;
        let reply = call.wait().map_err(|e| (Phase::Adjust, e))?;
        stats.bytes_received += reply.wire_bytes as u64;
        if reply.response != Response::Adjust {
            return Err((
                Phase::Adjust,
                Error::Protocol("expected adjust acknowledgment".into()),
            ));
        }
    }
    shards
        .meter()
        .record_step(stats.inputs, stats.pairs, stats.negatives);
    Ok(stats)
}

/// One dotprod broadcast, a barrier on all partial results, then one adjust
/// broadcast with the same seed.
pub fn train_step(
    shards: &ShardSet,
    batch: &Minibatch,
    negatives: u32,
    alpha: f64,
    seed: u64,
) -> Result<StepStats> {
    try_step(shards, batch, negatives, alpha, seed).map_err(|(_, e)| e)
}

/// `train_step` with a single retry under a fresh seed when a shard is
/// unreachable during the dotprod phase, before any shard has changed
/// state. Failures during adjust are not retried: some shards may already
/// have applied their share.
fn step_with_retry(
    shards: &ShardSet,
    batch: &Minibatch,
    negatives: u32,
    alpha: f64,
    seed: u64,
    retries: &mut u64,
) -> Result<StepStats> {
    match try_step(shards, batch, negatives, alpha, seed) {
        Ok(s) => Ok(s),
        Err((Phase::Dotprod, e @ Error::Unavailable { .. })) => {
            log::warn!("batch {}: {e}; retrying with a new seed", batch.batch_id);
            *retries += 1;
            try_step(
                shards,
                batch,
                negatives,
                alpha,
                derive_seed(&[seed, RETRY_STREAM]),
            )
            .map_err(|(_, e)| e)
        }
        Err((_, e)) => Err(e),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: u32,
    pub threads: usize,
    pub steps: u64,
    pub inputs: u64,
    pub pairs: u64,
    pub negatives: u64,
    pub retries: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub final_alpha: f64,
    pub elapsed_secs: f64,
}

impl TrainStats {
    fn absorb(&mut self, s: &StepStats) {
        self.steps += 1;
        self.inputs += s.inputs;
        self.pairs += s.pairs;
        self.negatives += s.negatives;
        self.bytes_sent += s.bytes_sent;
        self.bytes_received += s.bytes_received;
    }

    fn merge(&mut self, o: &TrainStats) {
        self.steps += o.steps;
        self.inputs += o.inputs;
        self.pairs += o.pairs;
        self.negatives += o.negatives;
        self.retries += o.retries;
        self.bytes_sent += o.bytes_sent;
        self.bytes_received += o.bytes_received;
        self.final_alpha = self.final_alpha.max(o.final_alpha);
    }
}

fn client_loop(
    part: &IndexedCorpus,
    vocab: &Vocabulary,
    config: &TrainConfig,
    shards: &ShardSet,
    client: u32,
    abort: &AtomicBool,
) -> Result<TrainStats> {
    let rate = LearningRate::from_config(config);
    let mut stats = TrainStats::default();
    for epoch in 0..config.epochs {
        let spec = epoch_spec(config, epoch, client);
        let sub = subsample(part, vocab, &spec);
        let epoch_total = sub.trainable_tokens();
        let mut done = 0u64;
        for batch in MinibatchIter::new(&sub, &spec, config.batch_size, config.interleaved) {
            if abort.load(Ordering::Relaxed) {
                return Ok(stats);
            }
            let alpha = rate.at(epoch, done, epoch_total);
            let seed = step_seed(config.seed, epoch, client, batch.batch_id);
            let step = step_with_retry(
                shards,
                &batch,
                config.negatives,
                alpha,
                seed,
                &mut stats.retries,
            )?;
            stats.absorb(&step);
            stats.final_alpha = alpha;
            done += batch.len() as u64;
        }
        log::debug!("client {client} finished epoch {epoch} ({done} input words)");
    }
    Ok(stats)
}

/// Trains for `config.epochs` passes. The corpus is split into
/// `config.threads` partitions, each driven by its own client thread over
/// the shared connections.
pub fn train(
    corpus: &IndexedCorpus,
    vocab: &Vocabulary,
    config: &TrainConfig,
    shards: &ShardSet,
) -> Result<TrainStats> {
    config.validate()?;
    if shards.dim() != config.dim || shards.num_shards() != config.shards {
        return Err(Error::Config(format!(
            "shards serve dim={} S={}, config says dim={} S={}",
            shards.dim(),
            shards.num_shards(),
            config.dim,
            config.shards
        )));
    }
    if shards.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "shards hold {} words, vocabulary has {}",
            shards.vocab_size(),
            vocab.len()
        )));
    }
    corpus.validate(vocab.len())?;
    let start = Instant::now();
    let parts = corpus.partition(config.threads);
    let abort = AtomicBool::new(false);
    let results: Vec<Result<TrainStats>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(c, part)| {
                let abort = &abort;
                std::thread::Builder::new()
                    .name(format!("client-{c}"))
                    .spawn_scoped(scope, move || {
                        let r = client_loop(part, vocab, config, shards, c as u32, abort);
                        if r.is_err() {
                            abort.store(true, Ordering::Relaxed);
                        }
                        r
                    })
                    .expect("spawn client thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    let mut total = TrainStats {
        epochs: config.epochs,
        threads: config.threads,
        ..Default::default()
    };
    for r in results {
        total.merge(&r?);
    }
    total.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(total)
}

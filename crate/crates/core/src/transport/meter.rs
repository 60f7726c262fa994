use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::frame::{Frame, OpCode};
use super::message::{accounting_op, carries_vector_components, scalar_payload_bytes};

const OPS: [OpCode; 6] = [
    OpCode::Hello,
    OpCode::Dotprod,
    OpCode::Adjust,
    OpCode::Export,
    OpCode::Shutdown,
    OpCode::Error,
];

fn op_slot(op: OpCode) -> usize {
    OPS.iter().position(|&o| o == op).unwrap_or(OPS.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Sent,
    Received,
}

/// One metered frame, recorded when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub direction: Direction,
    pub op: u8,
    pub answers: u8,
    pub call_id: u64,
    pub wire_bytes: u64,
    pub scalar_payload_bytes: u64,
    pub carries_vectors: bool,
}

#[derive(Debug, Default)]
struct OpCounters {
    frames: AtomicU64,
    bytes: AtomicU64,
}

/// Byte accounting for one client's traffic to all shards.
///
/// Counters only grow. Per-op byte counters sum to the direction totals.
#[derive(Debug, Default)]
pub struct BandwidthMeter {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    payload_sent: AtomicU64,
    payload_received: AtomicU64,
    vector_frames: AtomicU64,
    sent_by_op: [OpCounters; 6],
    received_by_op: [OpCounters; 6],
    steps: AtomicU64,
    minibatch_words: AtomicU64,
    pairs: AtomicU64,
    negative_samples: AtomicU64,
    trace: Mutex<Option<Vec<TraceEntry>>>,
}

/// Plain-number copy of a meter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Gradient coefficient (G) bytes in adjust requests.
    pub payload_sent: u64,
    /// Partial dot product (F) bytes in dotprod responses.
    pub payload_received: u64,
    pub vector_frames: u64,
    /// `(op name, frames, bytes)` per op, sent direction.
    pub sent_by_op: Vec<(String, u64, u64)>,
    pub received_by_op: Vec<(String, u64, u64)>,
    pub steps: u64,
    pub minibatch_words: u64,
    pub pairs: u64,
    pub negative_samples: u64,
}

impl MeterSnapshot {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    pub fn overhead_sent(&self) -> u64 {
        self.bytes_sent - self.payload_sent
    }

    pub fn overhead_received(&self) -> u64 {
        self.bytes_received - self.payload_received
    }

    /// Combines snapshots from several meters.
    pub fn merge(&self, other: &MeterSnapshot) -> MeterSnapshot {
        let add_ops =
            |a: &[(String, u64, u64)], b: &[(String, u64, u64)]| -> Vec<(String, u64, u64)> {
                if a.is_empty() {
                    return b.to_vec();
                }
                a.iter()
                    .zip(b.iter().chain(std::iter::repeat(&(String::new(), 0, 0))))
                    .map(|(x, y)| (x.0.clone(), x.1 + y.1, x.2 + y.2))
                    .collect()
            };
        MeterSnapshot {
            bytes_sent: self.bytes_sent + other.bytes_sent,
            bytes_received: self.bytes_received + other.bytes_received,
            payload_sent: self.payload_sent + other.payload_sent,
            payload_received: self.payload_received + other.payload_received,
            vector_frames: self.vector_frames + other.vector_frames,
            sent_by_op: add_ops(&self.sent_by_op, &other.sent_by_op),
            received_by_op: add_ops(&self.received_by_op, &other.received_by_op),
            steps: self.steps + other.steps,
            minibatch_words: self.minibatch_words + other.minibatch_words,
            pairs: self.pairs + other.pairs,
            negative_samples: self.negative_samples + other.negative_samples,
        }
    }
}

impl BandwidthMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// A meter that also keeps a per-frame trace.
    pub fn with_trace() -> Self {
        let m = Self::default();
        *m.trace.lock().expect("trace lock") = Some(Vec::new());
        m
    }

    fn record(&self, frame: &Frame, direction: Direction) {
        let bytes = frame.wire_len() as u64;
        let payload = scalar_payload_bytes(frame) as u64;
        let vectors = carries_vector_components(frame);
        let op = accounting_op(frame);
        let (total, payload_total, by_op) = match direction {
            Direction::Sent => (&self.bytes_sent, &self.payload_sent, &self.sent_by_op),
            Direction::Received => (
                &self.bytes_received,
                &self.payload_received,
                &self.received_by_op,
            ),
        };
        total.fetch_add(bytes, Ordering::Relaxed);
        payload_total.fetch_add(payload, Ordering::Relaxed);
        let slot = &by_op[op_slot(op)];
        slot.frames.fetch_add(1, Ordering::Relaxed);
        slot.bytes.fetch_add(bytes, Ordering::Relaxed);
        if vectors {
            self.vector_frames.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(trace) = self.trace.lock().expect("trace lock").as_mut() {
            trace.push(TraceEntry {
                direction,
                op: frame.op as u8,
                answers: op as u8,
                call_id: frame.call_id,
                wire_bytes: bytes,
                scalar_payload_bytes: payload,
                carries_vectors: vectors,
            });
        }
    }

    pub fn record_sent(&self, frame: &Frame) {
        self.record(frame, Direction::Sent)
    }

    pub fn record_received(&self, frame: &Frame) {
        self.record(frame, Direction::Received)
    }

    /// Counts one completed training step.
    pub fn record_step(&self, words: u64, pairs: u64, negative_samples: u64) {
        self.steps.fetch_add(1, Ordering::Relaxed);
        self.minibatch_words.fetch_add(words, Ordering::Relaxed);
        self.pairs.fetch_add(pairs, Ordering::Relaxed);
        self.negative_samples
            .fetch_add(negative_samples, Ordering::Relaxed);
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent.load(Ordering::Relaxed)
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received.load(Ordering::Relaxed)
    }

    pub fn take_trace(&self) -> Vec<TraceEntry> {
        self.trace
            .lock()
            .expect("trace lock")
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let ops = |counters: &[OpCounters; 6]| {
            OPS.iter()
                .zip(counters)
                .map(|(op, c)| {
                    (
                        format!("{op:?}").to_lowercase(),
                        c.frames.load(Ordering::Relaxed),
                        c.bytes.load(Ordering::Relaxed),
                    )
                })
                .collect()
        };
        MeterSnapshot {
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
            payload_sent: self.payload_sent.load(Ordering::Relaxed),
            payload_received: self.payload_received.load(Ordering::Relaxed),
            vector_frames: self.vector_frames.load(Ordering::Relaxed),
            sent_by_op: ops(&self.sent_by_op),
            received_by_op: ops(&self.received_by_op),
            steps: self.steps.load(Ordering::Relaxed),
            minibatch_words: self.minibatch_words.load(Ordering::Relaxed),
            pairs: self.pairs.load(Ordering::Relaxed),
            negative_samples: self.negative_samples.load(Ordering::Relaxed),
        }
    }
}

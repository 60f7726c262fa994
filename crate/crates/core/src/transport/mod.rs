//! Wire protocol, shard links and traffic accounting.

pub mod bandwidth;
pub mod frame;
pub mod link;
pub mod message;
pub mod meter;

pub use bandwidth::{
    approximate_ratio, exact_ratio, measured_vs_predicted, predicted_conventional_bytes,
    predicted_proposed_batch_bytes, predicted_proposed_bytes, required_gbit_per_sec,
    simulated_conventional_bytes, BandwidthModel, BandwidthReport,
};
pub use frame::{Frame, OpCode};
pub use link::{LocalLink, PendingCall, Reply, ShardLink, TcpLink, DEFAULT_TIMEOUT};
pub use message::{Request, Response};
pub use meter::{BandwidthMeter, MeterSnapshot, TraceEntry};

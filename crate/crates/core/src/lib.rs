//! Word2vec skipgram training on column-partitioned parameter-server
//! shards.
//!
//! Every shard holds a slice of columns of every input and output vector.
//! Clients never fetch vectors: they ask each shard for partial dot
//! products over a minibatch (`dotprod`), sum them, turn the sums into
//! per-pair gradient coefficients, and send those back (`adjust`). Both
//! calls carry the same seed so each shard regenerates identical negative
//! samples without keeping state between the two calls.

pub mod client;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod sampler;
pub mod shard;
pub mod store;
pub mod transport;

pub use client::{train, train_step, ShardSet, TrainConfig, TrainStats};
pub use corpus::{IndexedCorpus, Minibatch, Vocabulary, WindowSpec};
pub use error::{Error, Result};
pub use sampler::{NoiseTable, SeededDraw};
pub use shard::Shard;
pub use store::{FullVectorStore, Matrix, PartialVectorStore, ShardLayout};

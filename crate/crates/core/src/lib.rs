//! Adversary detection and robust label aggregation for crowdsourced
//! classification under the Dawid–Skene model.
//!
//! The pipeline estimates pairwise annotator agreement rates, separates their
//! low-rank structure with masked robust PCA, clusters annotators by
//! elastic-net subspace clustering, labels the clusters with side information
//! and aggregates labels in two stages so that colluding adversaries are
//! condensed into a single label source.

pub mod adversary;
pub mod agreement;
pub mod aggregation;
pub mod annotations;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod rpca;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Seeded generator used throughout simulation and clustering.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

//! Multi-modal self-supervised recommendation at desk scale.
//!
//! The crate is `no_std` and needs only `alloc`. It contains:
//!
//! * [`tape`]: a reverse-mode differentiation tape over dense 2-D tensors,
//!   with a finite-difference oracle in [`gradcheck`].
//! * [`graph`]: interaction graphs, splits, triplet sampling, normalized
//!   adjacency, sparsity buckets and a planted-preference generator.
//! * [`adversarial`]: the modality-guided relation generator, the Gumbel
//!   smoothed real proxy and the row critic with its gradient penalty.
//! * [`encoder`]: semantic-neighbor views, cross-modal attention and
//!   high-order bipartite propagation.
//! * [`objectives`]: final fusion, BPR, InfoNCE and the total objective.
//! * [`trainer`]: alternating critic / generator optimization.
//! * [`ranking`]: all-rank top-K evaluation.
//!
//! File formats, checkpoints and the CLI live in the companion `mmssl` crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adversarial;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod ranking;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic random stream used everywhere in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's random stream from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

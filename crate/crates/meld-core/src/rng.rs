//! Deterministic RNG stream derivation.
//!
//! Every stochastic draw in the crate comes from a `ChaCha8Rng` seeded through
//! [`stream`]. Streams are derived from `(root_seed, tag, index)` rather than
//! carried as mutable state, so resuming a run at step `k` reproduces the exact
//! draws of an uninterrupted run without serializing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a root seed, a purpose tag and an index.
pub fn stream(root_seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a plain `u64` sub-seed (for APIs that take a seed, not an RNG).
pub fn sub_seed(root_seed: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

//! Deterministic randomness.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`] seeded through
//! [`seeded`]. Child streams are derived from a parent seed and a label, so
//! adding a new consumer never perturbs existing streams.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// First eight bytes of `sha256(parent_le ‖ label)`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn child(parent: u64, label: &str) -> ChaCha8Rng {
    seeded(derive_seed(parent, label))
}

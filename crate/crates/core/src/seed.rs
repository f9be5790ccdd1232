//! Deterministic seed derivation.
//!
//! Every random decision in a run is keyed off a master seed plus a string
//! tag, so independent stages (split, init, per-epoch shuffles, sampling)
//! draw from isolated streams and changing one tag never perturbs another.

use sha2::{Digest, Sha256};

/// Derive a child seed from `(seed, tag)` via SHA-256.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// ChaCha RNG seeded from `(seed, tag)`.
pub fn rng_for(seed: u64, tag: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

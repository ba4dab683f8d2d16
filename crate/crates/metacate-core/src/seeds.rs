//! Deterministic seed derivation: every stage and task draws its randomness
//! from a named substream of one root seed, so stages are independently
//! reproducible and structurally independent (e.g. treatment assignment vs
//! outcome noise in the generator).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed, a stage label, and an index.
pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x1f]);
    h.update(stage.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// RNG for a named substream of the root seed.
pub fn rng_for(root: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage, index))
}

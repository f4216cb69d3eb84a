//! Deterministic randomness.
//!
//! Every run derives all of its randomness from one `u64` seed. Subsystems
//! get independent streams via [`derive`], so adding a consumer in one place
//! never perturbs the draws seen elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Counter-based generator; identical (seed, label) gives an identical
/// stream on every platform.
pub fn derive(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Per-item sub-stream, e.g. one stream per mutation-scan target.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    derive(seed, &format!("{label}/{index}"))
}

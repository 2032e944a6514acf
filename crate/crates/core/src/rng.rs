//! Deterministic RNG streams keyed by `(seed, purpose, ids...)`.
//!
//! Every random draw in the pipeline comes from a stream derived here, so
//! results do not depend on iteration order or on how work is split up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent ChaCha stream for a labelled purpose and a tuple of ids.
pub fn stream(seed: u64, purpose: &str, ids: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(word));
    rng
}

/// Stable numeric id for a string key.
pub fn key_id(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

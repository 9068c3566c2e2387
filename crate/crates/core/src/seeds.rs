//! Seed fan-out: every consumer of randomness gets its own stream derived
//! from the run seed and a stable name.
//!
//! `derive_seed(seed, name)` is the first 8 bytes (little endian) of
//! `SHA-256(seed.to_le_bytes() || name)`.

use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

/// Seed of item `index` within the stream `name`.
pub fn derive_indexed(seed: u64, name: &str, index: u64) -> u64 {
    derive_seed(seed, &format!("{name}/{index}"))
}

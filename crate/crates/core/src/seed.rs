//! Seed derivation. Every random stream in the pipeline comes from one base seed.

use sha2::{Digest, Sha256};

/// `u64` from the first 8 bytes (little-endian) of
/// `SHA-256(domain || base.to_le_bytes() || index.to_le_bytes())`.
pub fn derive_seed(domain: &str, base: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(base.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest.as_slice()[..8].try_into().unwrap())
}

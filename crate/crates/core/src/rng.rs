//! Deterministic randomness.
//!
//! Every stochastic routine takes an explicit generator. Shared randomness
//! between the two endpoints (shuffles, sample positions) is derived from a
//! common seed with [`derive_rng`], so both sides draw identical streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type DetRng = ChaCha12Rng;

pub fn seeded(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// Hashes a domain label and byte parts into a 32-byte seed.
pub fn derive_seed(label: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label.len() as u32).to_be_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn derive_rng(label: &str, parts: &[&[u8]]) -> DetRng {
    DetRng::from_seed(derive_seed(label, parts))
}

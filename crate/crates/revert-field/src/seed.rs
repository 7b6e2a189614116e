//! Deterministic RNG derivation.
//!
//! Every stochastic stage derives its own stream from the master seed, a
//! textual label and an index, so runs are reproducible bit-for-bit no
//! matter how stages are reordered or parallelized.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// 32-byte subseed from (master, label, index) via SHA-256.
pub fn subseed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Independent RNG stream for one stage of a run.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(subseed(master, label, index))
}

//! Labeled random sub-streams derived from one master seed.
//!
//! Every consumer of randomness (parameter draw, sample draw, shard
//! permutation, resampling, failure draws) asks for its own stream by label
//! and index path, so enabling one consumer never shifts another's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(master: u64, label: &str, path: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in path {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

/// A generator for the stream `(master, label, path)`.
pub fn stream(master: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(master, label, path))
}

/// A 64-bit seed for the stream `(master, label, path)`, for handing a
/// sub-stream to a component that takes a plain seed.
pub fn derive_seed(master: u64, label: &str, path: &[u64]) -> u64 {
    let d = digest(master, label, path);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

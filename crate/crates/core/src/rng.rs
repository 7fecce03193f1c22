//! Seed derivation.
//!
//! One master seed fans out into independent named streams:
//! `derive_seed(master, label)` is the first eight bytes (little-endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Streams are `ChaCha8Rng`, whose
//! output is portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(master: u64, label: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, label))
}

/// Stream for the `index`-th member of a family (one per sampling chain).
pub fn indexed_stream(master: u64, label: &str, index: u64) -> StreamRng {
    stream(master, &format!("{label}/{index}"))
}

pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

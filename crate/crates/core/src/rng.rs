//! Deterministic seed derivation.
//!
//! Dataset generation, augmentation, and training all draw from per-item RNG
//! streams keyed by stable indices, so the output never depends on worker
//! count or iteration interleaving.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Mix a base seed with up to two stream indices into a fresh seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(a)) ^ splitmix64(b.wrapping_add(0x51ed_270b)))
}

/// RNG for the stream identified by `(base, a, b)`.
pub fn stream_rng(base: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, a, b))
}

//! Deterministic random streams.
//!
//! Every source of randomness in the crate is derived from a single user
//! seed plus a short string tag, so independent subsystems (weight init,
//! data generation, batch shuffling) stay reproducible and decoupled: adding
//! draws to one stream never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a hash. Used for seed derivation only, so it must not
/// change across releases; std's `DefaultHasher` gives no such guarantee.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// An RNG for the stream identified by `(seed, tag)`.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()))
}

/// In-place Fisher-Yates shuffle (batch ordering in trainers).
pub fn shuffle_indices(order: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

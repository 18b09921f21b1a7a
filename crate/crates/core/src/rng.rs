//! Deterministic random number streams.
//!
//! Every stochastic step in the crate (weight init, data generation, epoch
//! shuffling, augmentation) draws from a ChaCha stream whose seed is derived
//! from a base seed plus a purpose tag, so independent stages never share a
//! stream and runs with equal seeds are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a base seed, a purpose tag, and an index.
pub fn stream_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(h ^ base).wrapping_add(index))
}

/// Creates a ChaCha RNG for one named stream.
pub fn stream_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, tag, index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

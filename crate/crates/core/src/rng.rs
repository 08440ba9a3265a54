//! Deterministic RNG streams keyed by integer coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for a `(seed, purpose, a, b)` coordinate; the same key
/// always yields the same sequence regardless of call order.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = mix64(mix64(mix64(seed ^ mix64(purpose)) ^ a) ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(key)
}

pub mod purpose {
    pub const SAMPLE_MASK: u64 = 1;
    pub const AUGMENT_LABELLED: u64 = 2;
    pub const AUGMENT_UNLABELLED_WEAK: u64 = 3;
    pub const AUGMENT_UNLABELLED_STRONG: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PHANTOM: u64 = 7;
    pub const SPLIT: u64 = 8;
}

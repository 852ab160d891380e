//! Keyed deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, tag, indices...)`. Streams derived from distinct keys are
//! independent, so work can be parallelized across samples/steps/positions
//! without the schedule affecting the result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, one per subsystem that draws randomness.
pub mod tag {
    pub const WORLD: u64 = 0x01;
    pub const DATASET: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const TRAIN: u64 = 0x04;
    pub const STAGE1_SAMPLE: u64 = 0x05;
    pub const ORDER: u64 = 0x06;
    pub const TOKEN_NOISE: u64 = 0x07;
}

/// splitmix64 finalizer; good avalanche for combining key parts.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG stream from a seed and a key path.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &k in key {
        state = mix(state ^ k.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    ChaCha8Rng::seed_from_u64(state)
}

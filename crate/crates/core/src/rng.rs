//! Seeded random streams.
//!
//! Every stochastic step derives its own ChaCha stream from a user seed and a
//! fixed tag, so adding a consumer never shifts the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Mixes `seed` with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag))
}

pub(crate) mod tags {
    pub const CLASS_MEANS: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const TEST_SAMPLES: u64 = 3;
    pub const PRETRAIN_SAMPLES: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const SELECT: u64 = 9;
    pub const PRETRAIN: u64 = 10;
}

//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a value
//! derived here, so parallel and serial evaluation draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a parent seed with a stream tag and an index into a child seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(seed, stream, index))
}

/// Stream tags, one per consumer, so unrelated draws never share a sequence.
pub mod stream {
    pub const TOPOLOGY: u64 = 1;
    pub const CLASSES: u64 = 2;
    pub const FEATURES: u64 = 3;
    pub const DATASET: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const EPSILON: u64 = 7;
    pub const DECODE: u64 = 8;
    pub const MAGNITUDE: u64 = 9;
    pub const EVENT: u64 = 10;
    pub const CANDIDATE: u64 = 11;
    pub const RECOVERY: u64 = 12;
    pub const POSITIONS: u64 = 13;
    pub const FINETUNE: u64 = 14;
}

//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is derived from a base seed and a list of tags, so streams are
//! independent of each other and of the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const DATA: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const ALIGN: u64 = 5;
    pub const ANALYSIS: u64 = 6;
    pub const SEARCH: u64 = 7;
    pub const TASK_TABLE: u64 = 8;
    pub const VALIDATION: u64 = 9;
}

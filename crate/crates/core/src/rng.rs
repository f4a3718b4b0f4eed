//! Seed derivation. Every stochastic step in the pipeline draws from its own
//! ChaCha stream whose seed is a hash of a base seed and a few integer tags,
//! so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `base`, producing an independent-looking 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix64(base), |acc, &t| mix64(acc ^ mix64(t.wrapping_add(GOLDEN))))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Maps a hash to a uniform float in `[0, 1)`.
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Stream tags, kept in one place so collisions are easy to spot.
pub mod tag {
    pub const SCATTERERS: u64 = 1;
    pub const BLOCKAGE: u64 = 2;
    pub const POSITIONS: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const TRUNK_INIT: u64 = 6;
    pub const HEAD_INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const DATASET: u64 = 9;
    pub const ENVIRONMENT: u64 = 10;
}

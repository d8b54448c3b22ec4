//! Seed derivation. Every random stream is keyed by the experiment seed plus a
//! purpose tag and coordinates, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const LABELS: u64 = 2;
    pub const FEATURES: u64 = 3;
    pub const AFFINE: u64 = 4;
    pub const CLASS_MEANS: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const CSV_SPLIT: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_f00d_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

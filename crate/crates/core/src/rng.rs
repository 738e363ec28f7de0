//! Seeded generators. Every random draw in the crate goes through here so that
//! a `(seed, stream)` pair fully determines a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for `stream` under `seed`; order-independent across streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng(seed: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Named streams so that unrelated consumers never share a generator.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SYNTHETIC: u64 = 3;
    pub const FEATURE_SUBSAMPLE: u64 = 4;
    pub const LABEL_NOISE: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const HE: u64 = 7;
    pub const LP_STAGES: u64 = 8;
    pub const LOUVAIN_ORDER: u64 = 9;
}

//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded through
//! `ChaCha8Rng::seed_from_u64`. Independent streams (one per video, one per
//! pipeline stage) get their seed from a master seed and a stream index via
//! [`derive_seed`], a SplitMix64 finalizer over `master + (stream + 1) * φ64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for stream `stream` of master seed `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

pub fn rng_for(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Named streams used when one master seed drives a whole experiment.
pub mod streams {
    pub const LABELS: u64 = u64::MAX - 1;
    pub const GENERATE: u64 = 1 << 40;
    pub const INIT: u64 = 2 << 40;
    pub const TRAIN: u64 = 3 << 40;
    pub const PERTURB: u64 = 4 << 40;
    pub const GRADCHECK: u64 = 5 << 40;
}

//! Seeded random streams.
//!
//! Every stochastic step takes an explicit `u64` seed. Sub-streams are
//! derived with a SplitMix64 mix so that e.g. the CV shuffle of pool entry 3
//! never depends on how many draws pool entry 2 consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the optimizer and harness.
pub mod stream {
    pub const INIT_DESIGN: u64 = 0x1A17;
    pub const SELECTION: u64 = 0x5E1E;
    pub const CANDIDATES: u64 = 0xCA4D;
    pub const ALLOCATION: u64 = 0xA110;
    pub const EVALUATION: u64 = 0xE7A1;
    pub const FINAL_FIT: u64 = 0xF17;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `base` and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

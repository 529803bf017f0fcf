//! Seedable, portable random streams.
//!
//! Every random draw in the crate flows through ChaCha8, so a given seed
//! reproduces bit-identical results across platforms. Independent consumers
//! get independent sub-streams derived with [`substream`]: the master seed is
//! mixed with a purpose tag and an index through splitmix64, one sub-stream
//! per generation call, so no two consumers ever share generator state.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for sub-stream derivation. Keeping them in one place avoids
/// accidental stream collisions between subsystems.
pub mod tag {
    pub const GEN_UNIFORM: u64 = 1;
    pub const GEN_CLUSTERED: u64 = 2;
    pub const INIT_SOLUTION: u64 = 3;
    pub const PARAM_INIT: u64 = 4;
    pub const EXPLORE: u64 = 5;
    pub const BUFFER: u64 = 6;
    pub const ELIMINATE: u64 = 7;
    pub const EPOCH_INSTANCE: u64 = 8;
    pub const EVAL_INSTANCE: u64 = 9;
    pub const EVAL_INIT: u64 = 10;
    pub const SIGMA: u64 = 11;
    pub const BASELINE: u64 = 12;
    pub const TARGET_ELIMINATE: u64 = 13;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(seed, tag, index)` into a single sub-stream seed.
pub fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

/// Returns the RNG for sub-stream `(tag, index)` of `seed`.
pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, index))
}

/// Standard normal draw via Box-Muller. Implemented here (rather than pulling
/// in a distributions crate) so the sampling path is fixed and portable.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

//! Seed handling. Every random consumer gets its own ChaCha stream keyed by
//! `(seed, domain, index)`, so draws for a unit or replicate do not depend on
//! the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream families.
pub mod domain {
    pub const IMPUTATION: u64 = 1;
    pub const SIR: u64 = 2;
    pub const DONOR: u64 = 3;
    pub const SUBSAMPLE: u64 = 4;
    pub const POPULATION: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const RESPONSE: u64 = 7;
    pub const MI: u64 = 8;
    pub const REPLICATE: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed; used to hand a replicate its own master seed.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index)
}

pub fn substream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}

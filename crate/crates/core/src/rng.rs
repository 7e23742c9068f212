//! Seeded random streams.
//!
//! Every consumer of randomness derives its own generator from
//! `(seed, stream, index)`, so nothing shares mutable RNG state and results do
//! not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
pub mod stream {
    pub const CONTROLLER: u64 = 1;
    pub const NSP: u64 = 2;
    pub const EMV: u64 = 3;
    pub const PLANT_NOISE: u64 = 4;
    pub const PLANT_DISTURBANCE: u64 = 5;
    pub const TUBE_REAL: u64 = 6;
    pub const LIPSCHITZ: u64 = 7;
    pub const SELFTEST: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(index.wrapping_add(splitmix64(stream))));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

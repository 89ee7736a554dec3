//! Stable per-cell random substreams.
//!
//! A substream seed is a splitmix64 fold of the master seed and a list of
//! integer tags (sweep value bits, seed index, trajectory index, ...). The
//! fold is fixed here, so seeds do not drift across toolchains the way
//! `std::hash` output may.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

// Domain tags keep substreams for different purposes apart.
pub const TAG_MDP: u64 = 0x4d44_5000;
pub const TAG_POLICY: u64 = 0x504f_4c00;
pub const TAG_TRAJECTORY: u64 = 0x5452_4a00;
pub const TAG_ESTIMATOR: u64 = 0x4553_5400;
pub const TAG_INNER: u64 = 0x494e_4e00;
pub const TAG_OUTER: u64 = 0x4f55_5400;
pub const TAG_TASK: u64 = 0x5441_534b;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn substream_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |acc, &t| {
        splitmix64(acc ^ splitmix64(t))
    })
}

pub fn substream(master: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(master, tags))
}

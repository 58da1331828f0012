//! Deterministic seed derivation. Every stochastic component of a run draws
//! from its own stream derived from the master seed and a purpose tag, so
//! adding or removing one component (for example autoencoder training) never
//! shifts the random draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of tags into a derived seed.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master ^ 0x6a09e667f3bcc909);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags for derived streams.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x01;
    pub const HEAD_INIT: u64 = 0x02;
    pub const SHUFFLE: u64 = 0x03;
    pub const AE_INIT: u64 = 0x04;
    pub const AE_SHUFFLE: u64 = 0x05;
    pub const DATA_MEANS: u64 = 0x06;
    pub const DATA_SAMPLES: u64 = 0x07;
    pub const DATA_ROTATION: u64 = 0x08;
    pub const AUGMENT: u64 = 0x09;
    pub const ANALYSIS_TRIAL: u64 = 0x0a;
    pub const JOINT_ORDER: u64 = 0x0b;
}

//! Counter-based seeding: every random stream is derived from a base seed and
//! a tuple of integer tags, so draws never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a base seed together with a list of tags.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    h
}

/// Uniform in [0, 1) from a hash (53 mantissa bits).
#[inline]
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in [0, 1) keyed by (seed, tags).
pub fn uniform(seed: u64, tags: &[u64]) -> f64 {
    unit(mix(seed, tags))
}

/// A ChaCha stream keyed by (seed, tags).
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Named stream tags, so unrelated subsystems never share draws.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const QUERY: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const OUTCOME: u64 = 4;
    pub const REVENUE: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SIM: u64 = 8;
    pub const EVAL: u64 = 9;
}

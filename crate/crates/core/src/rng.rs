//! Named random streams derived from a single `u64` seed.
//!
//! Every consumer of randomness asks for `stream(seed, purpose, index)`,
//! so results never depend on the order in which streams are created or on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed for the stream `(seed, purpose, index)`.
pub fn stream_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(purpose)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, purpose, index))
}

/// One stream per chain: `(seed, purpose, first + i)` for `i in 0..n`.
pub fn chain_streams(seed: u64, purpose: &str, first: u64, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|i| stream(seed, purpose, first + i)).collect()
}

pub fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

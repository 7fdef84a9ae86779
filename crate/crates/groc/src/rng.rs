//! Deterministic random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream derived from
//! the run seed plus a structural key (purpose, epoch, batch, view). Streams
//! are independent of each other, so adding or skipping one transform never
//! shifts the draws of another — this is what makes the method degeneracies
//! (e.g. adversarial training with zero rates collapsing onto the stochastic
//! baseline) bit-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are arbitrary but fixed forever.
pub mod stream {
    pub const PARTITION: u64 = 0x01;
    pub const MASK: u64 = 0x02;
    pub const DROP: u64 = 0x03;
    pub const SBM_EDGES: u64 = 0x04;
    pub const SBM_FEATURES: u64 = 0x05;
    pub const SBM_SPLITS: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const TARGETS: u64 = 0x08;
    pub const PROBE: u64 = 0x09;
    pub const SURROGATE: u64 = 0x0a;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from a seed and a structural key.
pub fn derive_rng(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &part in key {
        state = splitmix64(state ^ part);
    }
    ChaCha8Rng::seed_from_u64(state)
}

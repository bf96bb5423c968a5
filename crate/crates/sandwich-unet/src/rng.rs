//! Seed derivation and deterministic random streams.
//!
//! Every random choice in the crate flows through one global `u64` seed.
//! Independent consumers (weight init, epoch shuffles, per-sample
//! augmentation, grid runs) derive their own stream with [`derive_seed`],
//! so results never depend on evaluation order or thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a global seed, a purpose tag, and an index into a child seed.
///
/// Same inputs always give the same child seed; distinct tags or indices
/// give (for practical purposes) independent streams.
pub fn derive_seed(global: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(global ^ 0x9e37_79b9_7f4a_7c15);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// Deterministic, platform-independent RNG for a derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

//! Seed derivation. Every stochastic item is keyed by `(seed, index)` so that
//! results do not depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derives a seed for a named sub-stream, e.g. `derive_tagged(seed, "noise", i)`.
pub fn derive_tagged(seed: u64, tag: &str, index: u64) -> u64 {
    let t = tag
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    derive(seed ^ t, index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn item_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng(derive_tagged(seed, tag, index))
}

/// Uniform `[0, 1)` from the top 53 bits of a hash.
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

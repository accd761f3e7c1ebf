//! Seeded randomness.
//!
//! Every random decision in the crate draws from a [`PetRng`], which is
//! xoshiro256** seeded through SplitMix64 (`seed_from_u64`). Named
//! sub-streams are derived from a run seed by mixing the seed with the
//! FNV-1a hash of the stream name and passing the result through one
//! SplitMix64 round:
//!
//! ```text
//! derive_seed(seed, name) = splitmix64(seed ^ fnv1a64(name))
//! ```
//!
//! Bounded integers use the widening-multiply map
//! `(next_u64() as u128 * n) >> 64`, and [`shuffle`] is a Fisher–Yates pass
//! from the last element down to index 1. Both are pure functions of the
//! generator output, so results are identical on every platform.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type PetRng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> PetRng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(name.as_bytes()))
}

/// Generator for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> PetRng {
    seeded(derive_seed(seed, name))
}

/// Uniform integer in `0..n`. `n` must be positive.
pub fn bounded(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniform float in `[0, 1)` built from the top 53 bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = bounded(rng, i + 1);
        items.swap(i, j);
    }
}

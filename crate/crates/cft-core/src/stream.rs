//! Deterministic derivation of independent random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream seeded by
//! `(base seed, purpose tag, salts)`, so any stage can be replayed in
//! isolation and resuming mid-run consumes exactly the same values as an
//! uninterrupted run.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// FNV-1a fold of the tag and salts with a splitmix64 finalizer.
pub(crate) fn derive_seed(base: u64, tag: &str, salts: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for chunk in base.to_le_bytes() {
        h = (h ^ chunk as u64).wrapping_mul(PRIME);
    }
    for byte in tag.bytes() {
        h = (h ^ byte as u64).wrapping_mul(PRIME);
    }
    for salt in salts {
        for chunk in salt.to_le_bytes() {
            h = (h ^ chunk as u64).wrapping_mul(PRIME);
        }
    }
    // splitmix64 finalizer to decorrelate nearby salt values
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream(base: u64, tag: &str, salts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, tag, salts))
}

/// Uniform draw in `[0, 1)` with 53-bit resolution.
pub(crate) fn uniform01(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal via Box-Muller; one value per call so consumption is easy
/// to account for.
pub(crate) fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64; // (0, 1]
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

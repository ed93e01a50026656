//! Counter-based deterministic random number generation.
//!
//! Every random value in this crate is a pure function of a base seed, a
//! domain tag and a short list of counter words (pass index, layer index,
//! unit index, ...). There is no shared stream state, so values can be drawn
//! in any order and from any thread without affecting each other — the
//! property that makes dropout masks reproducible across platforms and
//! parallel schedules.
//!
//! The mixing function is the 64-bit xor-shift-multiply finalizer used by
//! MurmurHash3/SplitMix64, applied once per key word.

/// Weight initialization.
pub const DOMAIN_INIT: u64 = 1;
/// Test-time dropout masks.
pub const DOMAIN_TEST_MASK: u64 = 2;
/// Training-time dropout masks (independent of test masks by domain).
pub const DOMAIN_TRAIN_MASK: u64 = 3;
/// Mini-batch index selection.
pub const DOMAIN_BATCH: u64 = 4;
/// Synthetic dataset generation.
pub const DOMAIN_DATA: u64 = 5;
/// Data augmentation (noise, translations).
pub const DOMAIN_AUGMENT: u64 = 6;
/// Permutation-test sign swaps.
pub const DOMAIN_PERM: u64 = 7;
/// Synthetic benchmark inputs.
pub const DOMAIN_INPUT: u64 = 8;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    x = (x ^ (x >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

/// Hashes `(seed, words...)` into a single well-mixed 64-bit value.
#[inline]
pub fn hash(seed: u64, words: &[u64]) -> u64 {
    let mut h = mix64(seed ^ GOLDEN);
    for &w in words {
        h = mix64(h.wrapping_add(GOLDEN) ^ w);
    }
    h
}

/// Uniform draw in `[0, 1)` keyed by `(seed, words...)`.
#[inline]
pub fn uniform(seed: u64, words: &[u64]) -> f64 {
    // 53 high bits -> [0, 1) on the f64 grid.
    (hash(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, bound)` keyed by `(seed, words...)`.
///
/// Uses the multiply-shift reduction; bias is < bound / 2^64 and irrelevant
/// at the scales this crate works with.
#[inline]
pub fn uniform_index(seed: u64, words: &[u64], bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((hash(seed, words) as u128 * bound as u128) >> 64) as usize
}

/// Standard normal draw keyed by `(seed, words...)`, via Box-Muller.
///
/// Consumes two sub-counters appended to `words`, so distinct `words` never
/// share underlying uniforms.
pub fn normal(seed: u64, words: &[u64]) -> f64 {
    let mut key = Vec::with_capacity(words.len() + 1);
    key.extend_from_slice(words);
    key.push(0);
    // (bits + 1) * 2^-53 lies in (0, 1], keeping ln() finite.
    let u1 = ((hash(seed, &key) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    *key.last_mut().unwrap() = 1;
    let u2 = uniform(seed, &key);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

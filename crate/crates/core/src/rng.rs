//! Deterministic random streams.
//!
//! Two kinds of randomness are used throughout the crate:
//!
//! * sequential streams ([`stream`]) for walks and samplers, derived from a
//!   `(seed, label, index)` triple so every replica owns an independent
//!   ChaCha8 stream regardless of how work is scheduled;
//! * counter-based draws ([`keyed_unit`]) for environment reproduction, so
//!   the offspring of a tree vertex depend only on the environment seed and
//!   the vertex's genealogical key, never on the order of exploration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b).rotate_left(17))
}

/// Stable 64-bit hash of a label (FNV-1a), used to separate streams by purpose.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Independent sequential stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(seed, label_hash(label)));
    rng.set_stream(index);
    rng
}

/// Derived 64-bit seed, e.g. for an environment realization.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    combine(combine(seed, label_hash(label)), index)
}

/// Uniform in [0, 1) determined by `(seed, key, salt)`.
#[inline]
pub fn keyed_unit(seed: u64, key: u64, salt: u64) -> f64 {
    let bits = combine(combine(seed, key), salt);
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

//! Deterministic randomness plumbing.
//!
//! Every random stream in the toolkit is derived from one base seed through
//! a counter-based splitter, so pipeline stages can rerun independently and
//! still reproduce bit-exactly on any platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream seed from (base, purpose tag, counter).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    mix(base ^ mix(hash_tag(tag)) ^ mix(index.wrapping_mul(0xa24baed4963ee407)))
}

/// Counter-based ChaCha stream for a derived seed.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Stream seeded directly, for contracts that fix the seed arithmetic
/// themselves (e.g. per-sample scene seeds `base + index`).
pub fn stream_raw(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

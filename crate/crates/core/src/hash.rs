//! Small stable hashes used for feature bucketing and seed derivation.
//!
//! These must be reproducible across runs, platforms and compiler versions,
//! so we avoid `std::hash` and use FNV-1a / splitmix directly.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby integers.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic sub-seed for a named random stream.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    mix64(master ^ fnv1a64(tag.as_bytes()))
}

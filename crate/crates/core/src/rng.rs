//! Seed plumbing: one user-facing seed fans out to named sub-seeds so that
//! initialization, shuffling, and splitting draw from independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in label.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a named sub-seed from the base seed.
pub fn sub_seed(base: u64, label: &str) -> u64 {
    splitmix64(fnv1a(label) ^ base.wrapping_mul(0x9e3779b97f4a7c15))
}

/// Seeded generator for a named stream.
pub fn sub_rng(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(base, label))
}

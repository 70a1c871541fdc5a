//! Seeded randomness helpers.
//!
//! Every stochastic component in the crate draws from a [`ChaCha8Rng`] derived
//! from an explicit seed, so a run is a pure function of its config. Named
//! streams let independent components (corpus sampling, masking, init, ...)
//! share one top-level seed without coupling their draw sequences.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used for stream derivation and for content hashes (config echo,
/// vocab hash). Stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent named stream from a base seed.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ fnv1a64(label.as_bytes()).wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Standard normal via Box-Muller.
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

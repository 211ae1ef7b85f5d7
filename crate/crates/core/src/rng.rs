//! Deterministic named random streams.
//!
//! All randomness in a run flows from one master seed. Components draw from
//! named sub-streams (`"dataset"`, `"init"`, `"sampling"`, ...) that are
//! additionally keyed by integer indices (step, ray). Streams are stateless
//! with respect to each other: re-deriving `stream(seed, "sampling", &[step, ray])`
//! at any time yields the same generator, which is what makes checkpoint
//! resume and worker-count-independent batching possible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// ChaCha8 generator for `(seed, name, keys)`.
pub fn stream(seed: u64, name: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ fnv1a(name.as_bytes()));
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k));
    }
    let mut bytes = [0u8; 32];
    let mut s = state;
    for chunk in bytes.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform f64 in [0, 1).
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    use rand_chacha::rand_core::RngCore;
    // 53 random mantissa bits.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller (uses two uniforms per call; no caching so
/// the draw count stays predictable).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = loop {
        let u = uniform(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform integer in [0, n).
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0);
    // Modulo bias is < 2^-40 for the sizes used here (pixel pools, sample
    // counts), far below anything observable.
    use rand_chacha::rand_core::RngCore;
    (rng.next_u64() % n as u64) as usize
}

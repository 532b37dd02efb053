//! Deterministic RNG streams. Every stochastic choice in the crate draws from
//! a ChaCha8 stream seeded through `stream`, so results are reproducible
//! across platforms and independent of iteration order elsewhere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a label and a list of counters into a single 64-bit seed
/// (splitmix64 finalizer over the running state). Used to derive independent
/// per-sequence / per-epoch streams from one global seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
    }
    state
}

/// A ChaCha8 stream for the given seed parts.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Standard normal via Box-Muller; deterministic given the stream state.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a buffer with N(0, std^2) samples.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = std * normal(rng);
    }
}

/// Fisher-Yates shuffle of indices 0..n.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

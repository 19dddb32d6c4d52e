//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream seeded from a
//! `u64`, with independent sub-streams derived by mixing a tag into the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::probdist::{clamp_slice, softmax_slice, ProbVector};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for the sub-stream `tag` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random distribution over `k` classes, clamped at `eps`.
///
/// Logits are Gaussian with a log-uniform scale in `[0.01, 20]`, so draws
/// range from near-uniform vectors to ones pinned at the clamp floor.
pub fn random_distribution(rng: &mut StreamRng, k: usize, eps: f64) -> ProbVector {
    let scale = (rng.random_range(0.01f64.ln()..20f64.ln())).exp();
    let logits: Vec<f64> = (0..k).map(|_| scale * standard_normal(rng)).collect();
    ProbVector::from_raw(clamp_slice(&softmax_slice(&logits), eps))
}

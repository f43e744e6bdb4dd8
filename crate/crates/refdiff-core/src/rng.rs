//! Seeded randomness helpers.
//!
//! Every stochastic component takes a `ChaCha8Rng` (or a `u64` seed) rather
//! than ambient entropy, and sub-tasks derive independent child seeds with
//! [`child_seed`] instead of sharing one stream, so changing how many draws
//! one component makes never perturbs another.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One standard normal sample via Box-Muller.
///
/// Consumes exactly two uniform draws, which keeps stream layout stable
/// across releases. The log argument is clamped away from zero so the result
/// is always finite.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

/// Derive a child seed from a parent seed and a stream label.
///
/// SplitMix64 finalizer over the combined value; cheap, stateless, and
/// avalanche-complete, so adjacent labels give unrelated streams.
pub fn child_seed(parent: u64, label: u64) -> u64 {
    let mut z = parent ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

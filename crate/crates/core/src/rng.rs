//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`SplitMix64`] stream derived
//! from a user seed, so datasets, initial weights and batch orders are
//! reproducible bit-for-bit across runs and platforms.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

/// Creates the root generator for a seed.
pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream for a (seed, stream id) pair.
///
/// Used wherever work is split per item (one stream per generated sample) so
/// the result does not depend on the order items are processed in.
pub fn derive(seed: u64, stream: u64) -> SplitMix64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    SplitMix64::seed_from_u64(z ^ (z >> 31))
}

/// Standard normal draw.
pub fn normal<R: Rng>(rng: &mut R) -> f32 {
    rng.sample(rand_distr::StandardNormal)
}

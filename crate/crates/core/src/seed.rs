//! Seed derivation for reproducible, independent random streams.
//!
//! Every random draw in the engine is keyed by a tuple such as
//! `(root seed, sample id, step, feature)`. Mixing the tuple through a
//! SplitMix64 finalizer gives streams that are independent across keys yet
//! fully reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an ordered list of key parts into a single 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(GOLDEN, |acc, &p| {
        mix(acc.wrapping_add(GOLDEN) ^ mix(p.wrapping_add(GOLDEN)))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

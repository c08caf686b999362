//! Seed derivation.
//!
//! All randomness comes from `Xoshiro256PlusPlus`, whose `seed_from_u64`
//! expands the seed with SplitMix64 (increment `0x9E3779B97F4A7C15`,
//! multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`). Independent
//! streams are derived by mixing a base seed with a stream tag and indices
//! through the same SplitMix64 finalizer, so results do not depend on the
//! order in which components are initialized.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the stream identified by `(seed, tag, indices)`.
pub fn derive(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(tag));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tag, indices))
}

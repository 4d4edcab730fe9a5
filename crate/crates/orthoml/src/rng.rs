//! Seed-stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(master seed, purpose tag, index)`. Work units (folds, trees,
//! replications) own their stream, so results do not depend on how many
//! threads run them or in which order they finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Child seed for `(seed, tag, index)`.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(tag)) ^ splitmix(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Random stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}

//! Seeded random streams.
//!
//! Every stochastic component takes an explicit generator. Independent
//! streams (per epoch, per sample, per batch) are derived from a root seed by
//! hashing the stream coordinates, so the draw for sample `i` never depends on
//! how many numbers another sample consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the stream addressed by `(seed, parts...)`.
pub fn derive(seed: u64, parts: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

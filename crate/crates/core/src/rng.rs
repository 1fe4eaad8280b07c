//! Seed derivation shared by every stochastic component.
//!
//! Streams are keyed by `(seed, a, b)` so that results do not depend on the
//! order in which scenes, iterations or batches are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with two stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, a: u64, b: u64) -> Rng {
    rng_from(derive_seed(seed, a, b))
}

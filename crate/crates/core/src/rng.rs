//! Deterministic seeding helpers.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] derived from a base seed and a
//! stream index, so independent workers can be scheduled in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type IrcRng = ChaCha8Rng;

/// SplitMix64 finaliser; decorrelates nearby (seed, stream) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from_seed(seed: u64) -> IrcRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> IrcRng {
    rng_from_seed(derive_seed(seed, stream))
}

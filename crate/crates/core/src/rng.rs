//! Deterministic seed derivation so that every consumer draws from its own stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed, a stream label and an index into a new seed.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in stream.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

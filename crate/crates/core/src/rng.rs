//! Seed derivation for independent, reproducible RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(z: u64) -> u64 {
    mix64(z.wrapping_add(0x9E37_79B9_7F4A_7C15))
}

/// The splitmix64 finalizer: a bijective 64-bit mixing function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of tags (client id, round, purpose...)
/// into a new seed. Distinct tag sequences give unrelated streams.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng_from(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stream purposes, used as the first tag so that e.g. client training and
/// client selection never share a stream.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const CRAFT: u64 = 5;
    pub const BACKDOOR: u64 = 6;
    pub const DATA: u64 = 7;
}

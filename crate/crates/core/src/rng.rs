//! Seed derivation: one independent stream per named consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One round of splitmix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for the consumer `stream` under the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(stream))
}

/// Seed for item `index` of a stream (e.g. one volume of a generator).
pub fn derive_indexed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, stream) ^ splitmix64(index))
}

pub fn stream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name))
}

pub fn indexed_stream(master: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(master, name, index))
}

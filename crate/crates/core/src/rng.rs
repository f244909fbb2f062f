//! Named, independently seeded random streams.
//!
//! Every random draw in the crate comes from a stream identified by the
//! user-visible seed, a purpose label and an index, so that scenes, trials and
//! initializations can be generated in any order (or in parallel) and still
//! reproduce bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

/// Derives a child seed, for handing a sub-computation its own seed space.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, label, index).next_u64()
}

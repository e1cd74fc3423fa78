//! Seed derivation. One master seed fans out into independent ChaCha
//! streams keyed by a purpose label and an index, so adding a new consumer
//! never shifts the numbers an existing one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(purpose.as_bytes())));
    rng.set_stream(splitmix(index));
    rng
}

/// Derives a child seed, for handing to APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(purpose.as_bytes())) ^ splitmix(index.wrapping_add(1)))
}

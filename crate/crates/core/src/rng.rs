//! Deterministic RNG streams keyed by integer tuples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key path into one 64-bit seed. Different paths give independent streams.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Domain tags so that, e.g., sprite and trajectory streams never collide.
pub(crate) const TAG_SPRITE: u64 = 1;
pub(crate) const TAG_TRAJECTORY: u64 = 2;
pub(crate) const TAG_BACKGROUND: u64 = 3;
pub(crate) const TAG_SPLIT: u64 = 4;
pub(crate) const TAG_INIT: u64 = 5;
pub(crate) const TAG_EPOCH: u64 = 6;
pub(crate) const TAG_TUPLE: u64 = 7;
pub(crate) const TAG_PALETTE: u64 = 8;

//! Keyed seed derivation.
//!
//! Every random stream in the workbench is derived from a base seed plus a
//! small key path, so results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream generator used across the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key path into a base seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Hashes a string label into a key usable with [`derive_seed`].
pub fn label_key(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn stream(base: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, keys))
}

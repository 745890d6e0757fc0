//! Root-seed discipline: every stochastic consumer draws from a stream keyed
//! by `(root seed, purpose tag, index)`, so adding a consumer or running work
//! in a different order never perturbs an unrelated stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed, a purpose tag and an index into a child seed.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the tag keeps tags stable across releases.
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix64(splitmix64(root ^ splitmix64(tag)).wrapping_add(index))
}

pub fn stream(root: u64, purpose: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}

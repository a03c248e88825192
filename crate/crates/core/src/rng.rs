//! Named random sub-streams derived from one root seed.
//!
//! Every consumer (data, init, training, augmentation, ...) draws from its
//! own stream, so changing how much one consumer draws never shifts the
//! numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a(name))
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, name))
}

/// Stream `name` specialised to one item, e.g. the scene at a given index.
pub fn indexed_stream(root: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(splitmix64(derive_seed(root, name) ^ splitmix64(index)))
}

//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream names used across the pipeline.
pub const CONSTELLATION: &str = "constellation";
pub const DATASET: &str = "dataset";
pub const INTERRUPTIONS: &str = "interruptions";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const TRAFFIC: &str = "traffic";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn substream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name)))
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}

/// Stream for item `index` of a named family, e.g. one stream per packet.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(substream_seed(seed, name) ^ splitmix64(index)))
}

//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATASET: &str = "dataset";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const DROPOUT: &str = "dropout";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for the sub-stream `name` of `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps this independent of std's hasher.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}

/// Seed for item `index` of a sub-stream.
pub fn item_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(substream_seed(seed, name) ^ splitmix(index.wrapping_add(1)))
}

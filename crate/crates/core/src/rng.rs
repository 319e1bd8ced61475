//! Named, seed-derived random streams.
//!
//! Every source of randomness in a run (initialization, shuffling, dropout,
//! Gumbel noise, validation rollouts) gets its own stream derived from the run
//! seed and a stable name, so adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used only because it is stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ fnv1a(name.as_bytes()));
    splitmix64(b ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(seed: u64, name: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}

//! Counter-based seed derivation. Every random stream in the crate is keyed
//! by a root seed plus a stream tag, so no global generator exists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a sequence of counters.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags.
pub mod stream {
    pub const ENCODER: u64 = 1;
    pub const PROXIES: u64 = 2;
    pub const WARP: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const HEAD: u64 = 9;
}

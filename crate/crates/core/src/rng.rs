//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a 64-bit value derived from the global seed plus a
//! stream tag and an index, so results never depend on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags keep independent consumers of one global seed apart.
pub mod stream {
    pub const TRAIN_SAMPLE: u64 = 0x5341_4d50;
    pub const TRAIN_NOISE: u64 = 0x4e4f_4953;
    pub const INIT: u64 = 0x494e_4954;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const MC: u64 = 0x4d43_4d43;
    pub const SERVICE: u64 = 0x5345_5256;
    pub const PREVIEW: u64 = 0x5052_4556;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn stream_rng(base: u64, stream: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_distinct_and_repeatable() {
        assert_eq!(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
        assert_ne!(derive_seed(7, 1, 2), derive_seed(7, 1, 3));
        assert_ne!(derive_seed(7, 1, 2), derive_seed(7, 2, 2));
        let a: u64 = stream_rng(1, 2, 3).random();
        let b: u64 = stream_rng(1, 2, 3).random();
        assert_eq!(a, b);
    }
}

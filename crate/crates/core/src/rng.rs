//! Seed derivation. Every randomized operation takes an explicit `u64` seed;
//! independent streams are split from it with SplitMix64 so that results do not
//! depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const PSEUDO_POINTS: u64 = 3;
    pub const SENSORS: u64 = 4;
    pub const EPSILON: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(7, stream::SPLIT, 0), derive_seed(7, stream::NOISE, 0));
        assert_ne!(derive_seed(7, stream::SPLIT, 0), derive_seed(7, stream::SPLIT, 1));
        assert_eq!(derive_seed(7, stream::SPLIT, 3), derive_seed(7, stream::SPLIT, 3));
    }
}
